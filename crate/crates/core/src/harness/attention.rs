use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{s, Array2};

use crate::cohort::FeatureNames;
use crate::error::{Error, Result};
use crate::input::SubjectInput;
use crate::models::TriCoat;

pub const CLINICAL_IMAGING_CSV: &str = "clinical_imaging.csv";
pub const CLINICAL_GENETICS_CSV: &str = "clinical_genetics.csv";
pub const IMAGING_GENETICS_CSV: &str = "imaging_genetics.csv";

/// Attention of one subject with class-token rows and columns removed.
#[derive(Clone, Debug, PartialEq)]
pub struct SubjectAttention {
    /// `n_rois × n_clinical`
    pub imaging_clinical: Array2<f64>,
    /// `n_snps × n_clinical`
    pub genetics_clinical: Array2<f64>,
    /// `n_rois × n_snps`, `attn_I · attn_Gᵀ` over every clinical key.
    pub imaging_genetics: Array2<f64>,
}

/// Runs the model at evaluation and extracts the co-attention maps. The
/// full rows (class-token key included) are returned as the second value
/// so callers can check normalization.
pub fn subject_attention(model: &TriCoat, input: &SubjectInput) -> Result<(SubjectAttention, [Array2<f64>; 2])> {
    let (_, cache) = model.forward(input, None)?;
    let gi = cache.attn_imaging();
    let gg = cache.attn_genetics();
    let offset = usize::from(model.tokenizers.imaging.class_token.is_some());
    let body_i = gi.slice(s![offset.., ..]);
    let body_g = gg.slice(s![offset.., ..]);
    Ok((
        SubjectAttention {
            imaging_clinical: body_i.slice(s![.., offset..]).to_owned(),
            genetics_clinical: body_g.slice(s![.., offset..]).to_owned(),
            imaging_genetics: body_i.dot(&body_g.t()),
        },
        [gi.clone(), gg.clone()],
    ))
}

/// Running mean of per-subject maps.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AttentionMaps {
    pub n_subjects: usize,
    pub imaging_clinical: Option<Array2<f64>>,
    pub genetics_clinical: Option<Array2<f64>>,
    pub imaging_genetics: Option<Array2<f64>>,
}

fn add(acc: &mut Option<Array2<f64>>, x: &Array2<f64>) {
    match acc {
        Some(a) => *a += x,
        None => *acc = Some(x.clone()),
    }
}

impl AttentionMaps {
    fn sums(&mut self, a: &SubjectAttention) {
        add(&mut self.imaging_clinical, &a.imaging_clinical);
        add(&mut self.genetics_clinical, &a.genetics_clinical);
        add(&mut self.imaging_genetics, &a.imaging_genetics);
        self.n_subjects += 1;
    }

    /// Means over all subjects of every (model, inputs) group.
    pub fn average<'a, I>(groups: I) -> Result<Self>
    where
        I: IntoIterator<Item = (&'a TriCoat, &'a [SubjectInput])>,
    {
        let mut out = Self::default();
        for (model, inputs) in groups {
            for input in inputs {
                out.sums(&subject_attention(model, input)?.0);
            }
        }
        if out.n_subjects == 0 {
            return Err(Error::Data("attention export needs at least one test subject".into()));
        }
        let n = out.n_subjects as f64;
        for a in [&mut out.imaging_clinical, &mut out.genetics_clinical, &mut out.imaging_genetics].into_iter().flatten() {
            *a /= n;
        }
        Ok(out)
    }

    /// Writes the three chord CSVs `(source_feature, target_feature, mean_attention)`.
    pub fn write_csvs(&self, names: &FeatureNames, out_dir: &Path) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        let jobs = [
            (CLINICAL_IMAGING_CSV, &self.imaging_clinical, &names.rois, &names.clinical),
            (CLINICAL_GENETICS_CSV, &self.genetics_clinical, &names.snps, &names.clinical),
            (IMAGING_GENETICS_CSV, &self.imaging_genetics, &names.rois, &names.snps),
        ];
        let mut paths = Vec::new();
        for (file, map, rows, cols) in jobs {
            let map = map.as_ref().ok_or_else(|| Error::Data("attention maps are empty".into()))?;
            if map.dim() != (rows.len(), cols.len()) {
                return Err(Error::Shape(format!(
                    "{file}: map {:?} vs {} × {} feature names",
                    map.dim(),
                    rows.len(),
                    cols.len()
                )));
            }
            let path = out_dir.join(file);
            let mut w = csv::Writer::from_path(&path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
            let io = |e: csv::Error| Error::Data(format!("{}: {e}", path.display()));
            w.write_record(["source_feature", "target_feature", "mean_attention"]).map_err(io)?;
            for (i, r) in rows.iter().enumerate() {
                for (j, c) in cols.iter().enumerate() {
                    w.write_record([r.as_str(), c.as_str(), &map[[i, j]].to_string()]).map_err(io)?;
                }
            }
            w.flush().map_err(|e| Error::io(&path, e))?;
            paths.push(path);
        }
        Ok(paths)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{Model, ModelKind, ModelShape};
    use crate::testutil::{planted_cohort, tiny_encoder, tiny_model};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const SHAPE: ModelShape = ModelShape {
        n_rois: 3,
        n_snps: 4,
        n_clinical: 2,
    };

    fn setup() -> (TriCoat, Vec<SubjectInput>, FeatureNames) {
        let cohort = planted_cohort([2, 2, 1], SHAPE, 1.0, 0);
        let Model::TriCoat(m) = Model::new(
            ModelKind::Tricoat,
            SHAPE,
            &tiny_model(),
            &tiny_encoder(),
            &mut ChaCha8Rng::seed_from_u64(1),
        )
        .unwrap() else {
            unreachable!()
        };
        (m, SubjectInput::all_from(&cohort), cohort.feature_names)
    }

    #[test]
    fn single_subject_mean_is_that_subject() {
        let (m, inputs, _) = setup();
        let maps = AttentionMaps::average([(&m, &inputs[..1])]).unwrap();
        let (one, full) = subject_attention(&m, &inputs[0]).unwrap();
        assert_eq!(maps.imaging_clinical.unwrap(), one.imaging_clinical);
        assert_eq!(maps.genetics_clinical.unwrap(), one.genetics_clinical);
        assert_eq!(maps.imaging_genetics.unwrap(), one.imaging_genetics);
        for a in full {
            for row in a.rows() {
                assert!((row.sum() - 1.0).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn two_subjects_average() {
        let (m, inputs, _) = setup();
        let a = subject_attention(&m, &inputs[0]).unwrap().0;
        let b = subject_attention(&m, &inputs[3]).unwrap().0;
        let pair = [inputs[0].clone(), inputs[3].clone()];
        let maps = AttentionMaps::average([(&m, &pair[..])]).unwrap();
        let want = (&a.genetics_clinical + &b.genetics_clinical) / 2.0;
        let got = maps.genetics_clinical.unwrap();
        assert!(got.iter().zip(&want).all(|(x, y)| (x - y).abs() < 1e-15));
    }

    #[test]
    fn composition_is_product_through_clinical_keys() {
        let (m, inputs, _) = setup();
        let (one, full) = subject_attention(&m, &inputs[1]).unwrap();
        let [ai, ag] = full;
        for r in 0..SHAPE.n_rois {
            for s in 0..SHAPE.n_snps {
                let want: f64 = (0..ai.ncols()).map(|c| ai[[r + 1, c]] * ag[[s + 1, c]]).sum();
                assert!((one.imaging_genetics[[r, s]] - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn csv_layout_and_empty_set() {
        let (m, inputs, names) = setup();
        let dir = tempfile::tempdir().unwrap();
        let maps = AttentionMaps::average([(&m, &inputs[..])]).unwrap();
        let paths = maps.write_csvs(&names, dir.path()).unwrap();
        let rows = |p: &PathBuf| csv::Reader::from_path(p).unwrap().records().count();
        assert_eq!(rows(&paths[0]), 3 * 2);
        assert_eq!(rows(&paths[1]), 4 * 2);
        assert_eq!(rows(&paths[2]), 3 * 4);
        assert!(AttentionMaps::average([(&m, &inputs[..0])]).is_err());
    }
}
