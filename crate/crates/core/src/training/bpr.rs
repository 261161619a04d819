use crate::error::{shape_err, Result};
use crate::fusion::sigmoid;

/// `softplus(-x) = -ln σ(x)`, stable for large |x|.
#[inline]
fn neg_log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        (-x).exp().ln_1p()
    } else {
        -x + x.exp().ln_1p()
    }
}

/// Mean BPR loss over the batch, with the gradient with respect to each
/// positive and negative raw score.
pub fn bpr_loss(pos: &[f64], neg: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    if pos.len() != neg.len() {
        return shape_err(format!("{} positive vs {} negative scores", pos.len(), neg.len()));
    }
    let b = pos.len() as f64;
    let mut loss = 0.0;
    let mut g_pos = Vec::with_capacity(pos.len());
    let mut g_neg = Vec::with_capacity(pos.len());
    for (&p, &n) in pos.iter().zip(neg) {
        let x = p - n;
        loss += neg_log_sigmoid(x);
        let w = sigmoid(-x) / b;
        g_pos.push(-w);
        g_neg.push(w);
    }
    Ok((loss / b, g_pos, g_neg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn equal_scores_give_ln2() {
        let (l, gp, gn) = bpr_loss(&[0.3, -1.0], &[0.3, -1.0]).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(gp, vec![-0.25, -0.25]);
        assert_eq!(gn, vec![0.25, 0.25]);
    }

    #[test]
    fn large_margins_are_stable() {
        let (l, _, _) = bpr_loss(&[40.0], &[0.0]).unwrap();
        assert!(l < 1e-15 && l >= 0.0);
        let (l, g, _) = bpr_loss(&[0.0], &[800.0]).unwrap();
        assert!((l - 800.0).abs() < 1e-9);
        assert!(g[0].is_finite());
        assert!(bpr_loss(&[1.0], &[]).is_err());
    }

    #[test]
    fn gradients_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pos: Vec<f64> = (0..16).map(|_| rng.random_range(-3.0..3.0)).collect();
        let neg: Vec<f64> = (0..16).map(|_| rng.random_range(-3.0..3.0)).collect();
        let (_, gp, gn) = bpr_loss(&pos, &neg).unwrap();
        let eps = 1e-5;
        for i in 0..16 {
            for (which, g) in [(0, gp[i]), (1, gn[i])] {
                let (mut p1, mut n1) = (pos.clone(), neg.clone());
                let (mut p2, mut n2) = (pos.clone(), neg.clone());
                if which == 0 {
                    p1[i] += eps;
                    p2[i] -= eps;
                } else {
                    n1[i] += eps;
                    n2[i] -= eps;
                }
                let fd = (bpr_loss(&p1, &n1).unwrap().0 - bpr_loss(&p2, &n2).unwrap().0) / (2.0 * eps);
                assert!(((fd - g) / g).abs() <= 1e-8, "{fd} vs {g}");
            }
        }
    }
}
