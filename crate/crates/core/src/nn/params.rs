//! Named-tensor access to learnable weights.
//!
//! Every model struct exposes its tensors through [`Parameters`] in a fixed,
//! deterministic order. Gradients are stored in a second instance of the same
//! struct, so optimizers and checkpoints only ever walk two parallel lists.

use ndarray::{ArrayViewD, ArrayViewMutD};

pub type NamedView<'a> = (String, ArrayViewD<'a, f64>);
pub type NamedViewMut<'a> = (String, ArrayViewMutD<'a, f64>);

pub trait Parameters {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<NamedView<'a>>);
    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<NamedViewMut<'a>>);

    fn named(&self) -> Vec<NamedView<'_>> {
        let mut out = Vec::new();
        self.collect("", &mut out);
        out
    }

    fn named_mut(&mut self) -> Vec<NamedViewMut<'_>> {
        let mut out = Vec::new();
        self.collect_mut("", &mut out);
        out
    }

    fn num_parameters(&self) -> usize {
        self.named().iter().map(|(_, v)| v.len()).sum()
    }

    fn zero_(&mut self) {
        for (_, mut v) in self.named_mut() {
            v.fill(0.0);
        }
    }

    fn scale_(&mut self, factor: f64) {
        for (_, mut v) in self.named_mut() {
            v.mapv_inplace(|x| x * factor);
        }
    }

    /// `self += other`, tensor by tensor. Both sides must share a layout.
    fn add_(&mut self, other: &Self)
    where
        Self: Sized,
    {
        let src = other.named();
        for ((_, mut dst), (_, s)) in self.named_mut().into_iter().zip(src) {
            dst += &s;
        }
    }

    fn all_finite(&self) -> bool {
        self.named()
            .iter()
            .all(|(_, v)| v.iter().all(|x| x.is_finite()))
    }

    /// First non-finite tensor name, if any.
    fn first_non_finite(&self) -> Option<String> {
        self.named()
            .into_iter()
            .find(|(_, v)| v.iter().any(|x| !x.is_finite()))
            .map(|(n, _)| n)
    }

    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_parameters());
        for (_, v) in self.named() {
            out.extend(v.iter().copied());
        }
        out
    }

    fn assign_flat(&mut self, values: &[f64]) {
        let mut it = values.iter();
        for (_, mut v) in self.named_mut() {
            for x in v.iter_mut() {
                *x = *it.next().expect("flat parameter vector too short");
            }
        }
    }
}

/// Joins a prefix and a leaf name with a dot.
pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Zero-filled copy with the same layout, used for gradient accumulators.
pub fn zeros_like<P: Parameters + Clone>(p: &P) -> P {
    let mut g = p.clone();
    g.zero_();
    g
}
