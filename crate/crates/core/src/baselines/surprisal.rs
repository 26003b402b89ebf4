use crate::error::Result;
use crate::lattice::Segmentation;

/// Anything that reports `−log p(x_t | x_<t)` for each character.
pub trait SurprisalModel {
    fn surprisal(&self, ids: &[u32]) -> Result<Vec<f64>>;
}

/// Offsets `t ≥ 1` whose surprisal is a strict local maximum; the last
/// position compares only with its left neighbour.
pub fn surprisal_boundaries(surprisal: &[f64]) -> Vec<usize> {
    let n = surprisal.len();
    (1..n)
        .filter(|t| {
            let s = surprisal[*t];
            s > surprisal[t - 1] && (t + 1 == n || s > surprisal[t + 1])
        })
        .collect()
}

pub fn surprisal_segment(model: &impl SurprisalModel, ids: &[u32]) -> Result<Segmentation> {
    let s = model.surprisal(ids)?;
    Segmentation::from_boundaries(&surprisal_boundaries(&s), ids.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Constant;

    impl SurprisalModel for Constant {
        fn surprisal(&self, ids: &[u32]) -> Result<Vec<f64>> {
            Ok(vec![1.7; ids.len()])
        }
    }

    #[test]
    fn peaks() {
        assert_eq!(surprisal_boundaries(&[1.0, 3.0, 1.0, 3.0, 1.0]), vec![1, 3]);
        assert_eq!(surprisal_boundaries(&[1.0, 2.0, 3.0]), vec![2]);
        assert_eq!(surprisal_boundaries(&[3.0, 1.0, 1.0]), Vec::<usize>::new());
        assert_eq!(surprisal_boundaries(&[2.0, 2.0, 1.0]), Vec::<usize>::new());
        assert!(surprisal_boundaries(&[]).is_empty());
    }

    #[test]
    fn constant_model_never_splits() {
        let seg = surprisal_segment(&Constant, &[0, 1, 0, 1, 1]).unwrap();
        assert_eq!(seg.num_segments(), 1);
    }
}
