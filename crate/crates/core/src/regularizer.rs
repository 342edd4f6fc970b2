//! Agreement, slot-smoothness and diversity-floor losses and the total objective.

use serde::{Deserialize, Serialize};

use crate::params::Fwd;
use crate::tape::Var;
use crate::tensor::{softplus, Mat};

/// One logged row of the training objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub duet: f64,
    pub agr: f64,
    pub sm: f64,
    pub div: f64,
    pub sdb: f64,
    pub omega: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Lambdas {
    pub agr: f64,
    pub sm: f64,
    pub div: f64,
}

impl LossBreakdown {
    /// Assemble from averaged components; `sdb` and `total` follow from them.
    pub fn new(duet: f64, agr: f64, sm: f64, div: f64, lambdas: Lambdas, omega: f64) -> Self {
        let sdb = sdb_loss(agr, sm, div, lambdas);
        Self { duet, agr, sm, div, sdb, omega, total: total_loss(duet, sdb, omega) }
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `Σ_k w_k ‖h_k − h_acs‖²`.
pub fn agreement_loss(descriptors: &[Vec<f64>], w: &[f64], acs: &[f64]) -> f64 {
    descriptors.iter().zip(w).map(|(h, wk)| wk * sq_dist(h, acs)).sum()
}

/// `Σ_{k≥1} ‖h_k − h_{k−1}‖²`.
pub fn smoothness_loss(descriptors: &[Vec<f64>]) -> f64 {
    descriptors.windows(2).map(|p| sq_dist(&p[1], &p[0])).sum()
}

/// Mean over dimensions of the population variance across hypotheses,
/// computed on offsets from the first hypothesis.
pub fn hypothesis_variance(descriptors: &[Vec<f64>]) -> f64 {
    let k = descriptors.len() as f64;
    let h = descriptors[0].len();
    (0..h)
        .map(|j| {
            let base = descriptors[0][j];
            let mean = descriptors.iter().map(|d| d[j] - base).sum::<f64>() / k;
            descriptors.iter().map(|d| (d[j] - base - mean).powi(2)).sum::<f64>() / k
        })
        .sum::<f64>()
        / h as f64
}

/// `max(0, m − Var)` with `m = softplus(θ_m)`.
pub fn diversity_floor_loss(descriptors: &[Vec<f64>], theta_m: f64) -> f64 {
    (softplus(theta_m) - hypothesis_variance(descriptors)).max(0.0)
}

pub fn sdb_loss(agr: f64, sm: f64, div: f64, l: Lambdas) -> f64 {
    l.agr * agr + l.sm * sm + l.div * div
}

pub fn total_loss(duet: f64, sdb: f64, omega: f64) -> f64 {
    duet + omega * sdb
}

/// Tape nodes (each `1 × 1`) of the three components for one step.
#[derive(Debug, Clone, Copy)]
pub struct Components {
    pub agr: Var,
    pub sm: Var,
    pub div: Var,
}

/// Components from descriptors `D: K × H`, weights `w: 1 × K`, `h_acs: 1 × H` and `θ_m: 1 × 1`.
pub fn components(f: &mut Fwd, d: Var, w: Var, h_acs: Var, theta_m: Var) -> Components {
    let (k, h) = f.tape.value(d).shape();
    let ones_h = f.tape.constant(Mat::filled(h, 1, 1.0));

    let diff = f.tape.sub(d, h_acs);
    let sq = f.tape.mul(diff, diff);
    let per_slot = f.tape.matmul(sq, ones_h);
    let agr = f.tape.matmul(w, per_slot);

    let sm = if k > 1 {
        let mut shift = Mat::zeros(k - 1, k);
        for i in 0..k - 1 {
            shift[(i, i)] = -1.0;
            shift[(i, i + 1)] = 1.0;
        }
        let shift = f.tape.constant(shift);
        let steps = f.tape.matmul(shift, d);
        let sq = f.tape.mul(steps, steps);
        f.tape.sum_all(sq)
    } else {
        f.tape.constant(Mat::scalar(0.0))
    };

    // variance of the offsets from slot 0: identical rows give exactly zero
    let first = f.tape.gather_rows(d, &[0]);
    let offsets = f.tape.sub(d, first);
    let centre = f.tape.constant(Mat::filled(k, k, 1.0 / k as f64));
    let mean = f.tape.matmul(centre, offsets);
    let dev = f.tape.sub(offsets, mean);
    let sq = f.tape.mul(dev, dev);
    let var = f.tape.sum_all(sq);
    let var = f.tape.scale(var, 1.0 / (k * h) as f64);
    let m = f.tape.softplus(theta_m);
    let gap = f.tape.sub(m, var);
    let div = f.tape.relu(gap);

    Components { agr, sm, div }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use crate::tape::Tape;
    use crate::tensor::softplus_inverse;
    use proptest::prelude::*;

    const UNIT: Lambdas = Lambdas { agr: 1.0, sm: 1.0, div: 1.0 };

    #[test]
    fn component_examples() {
        let d = vec![vec![0.0], vec![2.0]];
        assert_eq!(agreement_loss(&d, &[0.5, 0.5], &[1.0]), 1.0);
        assert_eq!(agreement_loss(&d, &[0.0, 1.0], &[2.0]), 0.0);
        assert_eq!(smoothness_loss(&[vec![0.0], vec![1.0], vec![3.0]]), 5.0);
        assert_eq!(smoothness_loss(&[vec![4.0]]), 0.0);
        assert_eq!(hypothesis_variance(&d), 1.0);
        assert_eq!(diversity_floor_loss(&d, softplus_inverse(0.1)), 0.0);
        assert_eq!(diversity_floor_loss(&d, softplus_inverse(1.0)), 0.0);
        let same = vec![vec![1.0, 2.0]; 3];
        let tm = softplus_inverse(0.1);
        assert_eq!(diversity_floor_loss(&same, tm), softplus(tm));
        assert_eq!(sdb_loss(1.0, 5.0, 0.0, UNIT), 6.0);
        assert_eq!(sdb_loss(1.0, 5.0, 7.0, Lambdas { agr: 0.0, sm: 0.0, div: 0.0 }), 0.0);
        assert_eq!(total_loss(2.0, 3.0, 0.5), 3.5);
        assert_eq!(total_loss(2.0, 0.0, 0.9), 2.0);
        assert!(total_loss(2.0, 3.0, softplus(-800.0)) == 2.0);
    }

    #[test]
    fn tape_components_match_values() {
        let d = vec![vec![0.3, -1.0, 2.0], vec![1.0, 0.5, -0.5], vec![-0.2, 0.1, 0.0]];
        let w = vec![0.2, 0.5, 0.3];
        let acs: Vec<f64> = (0..3).map(|j| (0..3).map(|k| w[k] * d[k][j]).sum()).collect();
        let store = ParamStore::new();
        let mut tape = Tape::new();
        let mut f = Fwd::new(&mut tape, &store, false);
        let dv = f.tape.constant(Mat::from_rows(&d));
        let wv = f.tape.constant(Mat::row_vector(w.clone()));
        let av = f.tape.constant(Mat::row_vector(acs.clone()));
        let tm = f.tape.constant(Mat::scalar(0.7));
        let c = components(&mut f, dv, wv, av, tm);
        assert!((f.tape.value(c.agr).item() - agreement_loss(&d, &w, &acs)).abs() < 1e-14);
        assert!((f.tape.value(c.sm).item() - smoothness_loss(&d)).abs() < 1e-14);
        assert!((f.tape.value(c.div).item() - diversity_floor_loss(&d, 0.7)).abs() < 1e-14);
    }

    #[test]
    fn identical_hypotheses_on_tape() {
        let d = Mat::from_rows(&[vec![0.5, 1.5], vec![0.5, 1.5], vec![0.5, 1.5]]);
        let store = ParamStore::new();
        let mut tape = Tape::new();
        let mut f = Fwd::new(&mut tape, &store, false);
        let dv = f.tape.constant(d);
        let wv = f.tape.constant(Mat::row_vector(vec![0.2, 0.3, 0.5]));
        let av = f.tape.constant(Mat::row_vector(vec![0.5, 1.5]));
        let theta = softplus_inverse(0.1);
        let tm = f.tape.constant(Mat::scalar(theta));
        let c = components(&mut f, dv, wv, av, tm);
        assert_eq!(f.tape.value(c.agr).item(), 0.0);
        assert_eq!(f.tape.value(c.sm).item(), 0.0);
        assert_eq!(f.tape.value(c.div).item(), softplus(theta));
    }

    #[test]
    fn theta_m_gets_no_gradient_above_the_floor() {
        let store = ParamStore::new();
        let mut tape = Tape::new();
        let mut f = Fwd::new(&mut tape, &store, false);
        let dv = f.tape.constant(Mat::from_rows(&[vec![0.0], vec![2.0]]));
        let wv = f.tape.constant(Mat::row_vector(vec![0.5, 0.5]));
        let av = f.tape.constant(Mat::row_vector(vec![1.0]));
        let tm = f.tape.param(Mat::scalar(softplus_inverse(0.1)));
        let c = components(&mut f, dv, wv, av, tm);
        let g = f.tape.backward(c.div);
        assert_eq!(g.get(tm).map(|m| m.item()).unwrap_or(0.0), 0.0);
    }

    fn descriptors() -> impl Strategy<Value = Vec<Vec<f64>>> {
        prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 4), 1..6)
    }

    proptest! {
        #[test]
        fn permutation_behaviour(d in descriptors(), raw_w in prop::collection::vec(0.01f64..1.0, 6), rot in 0usize..6) {
            let k = d.len();
            let total: f64 = raw_w[..k].iter().sum();
            let w: Vec<f64> = raw_w[..k].iter().map(|x| x / total).collect();
            let acs: Vec<f64> = (0..4).map(|j| (0..k).map(|i| w[i] * d[i][j]).sum()).collect();
            let perm: Vec<usize> = (0..k).map(|i| (i + rot) % k).collect();
            let pd: Vec<Vec<f64>> = perm.iter().map(|&i| d[i].clone()).collect();
            let pw: Vec<f64> = perm.iter().map(|&i| w[i]).collect();
            prop_assert!((agreement_loss(&d, &w, &acs) - agreement_loss(&pd, &pw, &acs)).abs() < 1e-9);
            prop_assert!((diversity_floor_loss(&d, 0.3) - diversity_floor_loss(&pd, 0.3)).abs() < 1e-9);
            prop_assert!(agreement_loss(&d, &w, &acs) >= 0.0);
            prop_assert!(smoothness_loss(&d) >= 0.0);
            prop_assert!(diversity_floor_loss(&d, 0.3) >= 0.0);
        }
    }
}
