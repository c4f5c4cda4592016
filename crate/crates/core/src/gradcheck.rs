//! Central-difference verification of backpropagated gradients.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::ParamId;
use crate::error::{Error, Result};
use crate::multi_exit::{Example, MultiExitModel};

/// Which scalar coordinates to perturb.
#[derive(Debug, Clone, PartialEq)]
pub enum Selection {
    All,
    /// Every coordinate of the listed tensors.
    Params(Vec<ParamId>),
    /// `count` coordinates drawn uniformly from the whole model.
    Sample { count: usize, seed: u64 },
    Coords(Vec<(ParamId, usize)>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    /// Coordinates with relative error above the tolerance.
    pub failures: usize,
    pub worst: Option<(ParamId, usize)>,
}

/// Gradients smaller than this in both routes are compared absolutely.
const REL_FLOOR: f64 = 1e-7;

pub fn finite_diff_check(
    model: &MultiExitModel,
    example: &Example,
    selection: &Selection,
    eps: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    if !(1e-6..=1e-3).contains(&eps) {
        return Err(Error::InvalidArgument(format!("eps {eps} outside [1e-6, 1e-3]")));
    }
    let (_, grads) = model.instance_loss_and_grad(example)?;
    let coords: Vec<(ParamId, usize)> = match selection {
        Selection::All => all_coords(model, None),
        Selection::Params(ids) => all_coords(model, Some(ids)),
        Selection::Sample { count, seed } => {
            let mut all = all_coords(model, None);
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            all.shuffle(&mut rng);
            all.truncate(*count);
            all
        }
        Selection::Coords(c) => c.clone(),
    };

    let mut probe = model.clone();
    let mut report = GradCheckReport { checked: 0, max_rel_error: 0.0, failures: 0, worst: None };
    for (id, i) in coords {
        let orig = probe.store.get(id).values()[i];
        probe.store.get_mut(id).values_mut()[i] = orig + eps;
        let plus = probe.total_loss(std::slice::from_ref(example))?;
        probe.store.get_mut(id).values_mut()[i] = orig - eps;
        let minus = probe.total_loss(std::slice::from_ref(example))?;
        probe.store.get_mut(id).values_mut()[i] = orig;

        let numeric = (plus - minus) / (2.0 * eps);
        let analytic = grads.get(id).map_or(0.0, |g| g[i]);
        let err = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(REL_FLOOR);
        report.checked += 1;
        if err > tol {
            report.failures += 1;
        }
        if err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst = Some((id, i));
        }
    }
    Ok(report)
}

fn all_coords(model: &MultiExitModel, only: Option<&[ParamId]>) -> Vec<(ParamId, usize)> {
    model
        .store
        .ids()
        .filter(|id| only.map_or(true, |o| o.contains(id)))
        .flat_map(|id| (0..model.store.get(id).len()).map(move |i| (id, i)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;

    fn d8_model() -> MultiExitModel {
        let config = EncoderConfig {
            vocab_size: 12,
            d_model: 8,
            n_blocks: 2,
            n_heads: 2,
            ffn_dim: 16,
            max_seq_len: 6,
            exit_blocks: vec![1, 2],
        };
        MultiExitModel::new(config, vec!["x".into(), "y".into()], 11).unwrap()
    }

    #[test]
    fn empty_selection_reports_zero() {
        let m = d8_model();
        let ex = Example { tokens: vec![1, 4, 5], gold: 1 };
        let r = finite_diff_check(&m, &ex, &Selection::Coords(vec![]), 1e-5, 1e-4).unwrap();
        assert_eq!(r.checked, 0);
        assert_eq!(r.max_rel_error, 0.0);
    }

    #[test]
    fn eps_range_enforced() {
        let m = d8_model();
        let ex = Example { tokens: vec![1], gold: 0 };
        assert!(finite_diff_check(&m, &ex, &Selection::All, 1e-2, 1e-4).is_err());
    }

    #[test]
    fn head_only_check_is_tight() {
        let m = d8_model();
        let ex = Example { tokens: vec![1, 7, 3, 11], gold: 0 };
        let ids = m.exits.iter().flat_map(|h| [h.weight, h.bias]).collect();
        let r = finite_diff_check(&m, &ex, &Selection::Params(ids), 1e-5, 1e-6).unwrap();
        assert!(r.checked > 0);
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }
}
