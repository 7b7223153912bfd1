//! Training losses: masked unit prediction under PIT, CTC and PIT-CTC.

pub mod ctc;
pub mod pit;

pub use ctc::{ctc_forward_backward, decode_ids, encode_text, CtcResult, BLANK, CHAR_VOCAB};
pub use pit::{pit_assign, Assignment, PairLossMatrix, PitMethod};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::labels::UnitSequence;
use crate::masking::MaskSet;
use crate::tensor::Tensor;

fn check_pair(log_post: &Tensor, z: &UnitSequence, mask: &MaskSet) -> Result<(usize, usize)> {
    let (t, v) = log_post.dims2()?;
    if z.len() != t || mask.len() != t {
        return Err(Error::shape(
            "stream_pair_loss",
            format!("{t} frames, {} targets, {} mask entries", z.len(), mask.len()),
        ));
    }
    if mask.count() == 0 {
        return Err(Error::invalid("empty mask"));
    }
    if let Some(&u) = z.units.iter().find(|&&u| u as usize >= v) {
        return Err(Error::invalid(format!("unit {u} outside vocab {v}")));
    }
    Ok((t, v))
}

/// `(flat index, weight)` picks whose weighted sum is the pair loss.
fn pair_picks(log_post: &Tensor, z: &UnitSequence, mask: &MaskSet, sil_weight: f64, scale: f64) -> Result<Vec<(usize, f64)>> {
    let (_, v) = check_pair(log_post, z, mask)?;
    let norm = scale / mask.count() as f64;
    Ok(mask
        .indices()
        .into_iter()
        .map(|t| {
            let u = z.units[t];
            let w = if u == z.sil { sil_weight } else { 1.0 };
            (t * v + u as usize, -w * norm)
        })
        .collect())
}

/// Mean negative log-likelihood of `z` over masked frames; SIL frames are
/// weighted by `sil_weight`.
pub fn stream_pair_loss(log_post: &Tensor, z: &UnitSequence, mask: &MaskSet, sil_weight: f64) -> Result<f64> {
    let picks = pair_picks(log_post, z, mask, sil_weight, 1.0)?;
    Ok(picks.iter().map(|&(i, w)| w * log_post.data()[i]).sum())
}

pub fn pair_loss_matrix(
    log_posts: &[&Tensor],
    targets: &[UnitSequence],
    mask: &MaskSet,
    sil_weight: f64,
) -> Result<PairLossMatrix> {
    let k = log_posts.len();
    if targets.len() != k {
        return Err(Error::shape("pair_loss_matrix", format!("{k} streams, {} targets", targets.len())));
    }
    let mut values = Vec::with_capacity(k * k);
    for lp in log_posts {
        for z in targets {
            values.push(stream_pair_loss(lp, z, mask, sil_weight)?);
        }
    }
    PairLossMatrix::new(k, values)
}

#[derive(Clone, Debug)]
pub struct PitLoss {
    pub loss: Var,
    pub assignment: Assignment,
    pub matrix: PairLossMatrix,
}

/// PIT masked unit prediction loss. Only the chosen pairs enter the graph.
pub fn masked_pss_loss(
    g: &mut Graph,
    log_posts: &[Var],
    targets: &[UnitSequence],
    mask: &MaskSet,
    sil_weight: f64,
    method: PitMethod,
) -> Result<PitLoss> {
    let values: Vec<&Tensor> = log_posts.iter().map(|&v| g.value(v)).collect();
    let matrix = pair_loss_matrix(&values, targets, mask, sil_weight)?;
    let assignment = pit_assign(&matrix, method)?;
    let k = log_posts.len() as f64;
    let mut terms = Vec::with_capacity(log_posts.len());
    for (j, &i) in assignment.pi.iter().enumerate() {
        let picks = pair_picks(g.value(log_posts[j]), &targets[i], mask, sil_weight, 1.0 / k)?;
        terms.push(g.pick_sum(log_posts[j], picks)?);
    }
    let loss = g.add_scalars(&terms)?;
    Ok(PitLoss {
        loss,
        assignment,
        matrix,
    })
}

/// Graph node for `-log p(target)`; `None` when the target cannot fit.
pub fn ctc_loss(g: &mut Graph, log_post: Var, target: &[usize]) -> Result<(f64, Option<Var>)> {
    let r = ctc_forward_backward(g.value(log_post), target)?;
    match r.grad {
        Some(grad) => {
            let node = g.custom_scalar(log_post, r.loss, grad)?;
            Ok((r.loss, Some(node)))
        }
        None => Ok((r.loss, None)),
    }
}

/// PIT over the `K x K` CTC matrix; infeasible pairs cost `+inf`.
pub fn pit_ctc_loss(g: &mut Graph, log_posts: &[Var], targets: &[Vec<usize>], method: PitMethod) -> Result<PitLoss> {
    let k = log_posts.len();
    if targets.len() != k || k == 0 {
        return Err(Error::shape("pit_ctc_loss", format!("{k} streams, {} transcripts", targets.len())));
    }
    let mut results = Vec::with_capacity(k * k);
    for &lp in log_posts {
        for z in targets {
            results.push(ctc_forward_backward(g.value(lp), z)?);
        }
    }
    let matrix = PairLossMatrix::new(k, results.iter().map(|r| r.loss).collect())?;
    let assignment = pit_assign(&matrix, method)?;
    let mut terms = Vec::with_capacity(k);
    for (j, &i) in assignment.pi.iter().enumerate() {
        let r = &results[j * k + i];
        let grad = r.grad.clone().expect("chosen pair is feasible");
        let node = g.custom_scalar(log_posts[j], r.loss, grad)?;
        terms.push(g.scale(node, 1.0 / k as f64)?);
    }
    let loss = g.add_scalars(&terms)?;
    Ok(PitLoss {
        loss,
        assignment,
        matrix,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::keyed;
    use crate::tensor::log_softmax_rows;
    use rand::Rng as _;

    fn random_lp(t: usize, v: usize, r: &mut crate::rng::Rng) -> Tensor {
        let raw = Tensor::matrix(t, v, (0..t * v).map(|_| r.random_range(-2.0..2.0)).collect()).unwrap();
        log_softmax_rows(&raw).unwrap()
    }

    fn random_units(t: usize, v: usize, r: &mut crate::rng::Rng) -> UnitSequence {
        UnitSequence::new((0..t).map(|_| r.random_range(0..v as u32)).collect(), v as u32 - 1)
    }

    #[test]
    fn pair_loss_closed_forms() {
        let v = 6;
        let uniform = Tensor::full(&[8, v], -(v as f64).ln());
        let z = UnitSequence::new(vec![0, 1, 2, 3, 4, 5, 0, 1], 5);
        let m = MaskSet::from_indices(8, &[1, 4, 6]);
        assert!((stream_pair_loss(&uniform, &z, &m, 1.0).unwrap() - (v as f64).ln()).abs() < 1e-15);

        let mut onehot = Tensor::full(&[8, v], -50.0);
        for (t, &u) in z.units.iter().enumerate() {
            onehot.data_mut()[t * v + u as usize] = 0.0;
        }
        assert!(stream_pair_loss(&onehot, &z, &m, 1.0).unwrap().abs() <= 1e-9);
        assert!(stream_pair_loss(&uniform, &z, &MaskSet::none(8), 1.0).is_err());
    }

    #[test]
    fn pair_loss_matches_direct_sum() {
        let mut r = keyed(1, &[]);
        for _ in 0..50 {
            let lp = random_lp(20, 7, &mut r);
            let z = random_units(20, 7, &mut r);
            let idx: Vec<usize> = (0..20).filter(|_| r.random::<f64>() < 0.4).chain([3]).collect();
            let m = MaskSet::from_indices(20, &idx);
            let mut direct = 0.0;
            for t in 0..20 {
                if m.masked[t] {
                    direct -= lp.row(t)[z.units[t] as usize];
                }
            }
            direct /= m.count() as f64;
            assert!((stream_pair_loss(&lp, &z, &m, 1.0).unwrap() - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn pss_loss_is_invariant_to_target_order_and_ties_pick_smallest() {
        let mut r = keyed(2, &[]);
        let lps: Vec<Tensor> = (0..3).map(|_| random_lp(12, 5, &mut r)).collect();
        let zs: Vec<UnitSequence> = (0..3).map(|_| random_units(12, 5, &mut r)).collect();
        let m = MaskSet::from_indices(12, &[0, 2, 5, 6, 7]);
        let run = |zs: &[UnitSequence]| {
            let mut g = Graph::new();
            let vars: Vec<Var> = lps.iter().map(|t| g.input(t.clone())).collect();
            let out = masked_pss_loss(&mut g, &vars, zs, &m, 1.0, PitMethod::Brute).unwrap();
            (g.scalar(out.loss), out.assignment)
        };
        let (a, pa) = run(&zs);
        let swapped = vec![zs[2].clone(), zs[0].clone(), zs[1].clone()];
        let (b, pb) = run(&swapped);
        assert!((a - b).abs() < 1e-12);
        // Target i of the original order sits at position perm[i] of the swapped order.
        let perm = [1, 2, 0];
        assert_eq!(pa.pi.iter().map(|&i| perm[i]).collect::<Vec<_>>(), pb.pi);

        let dup = vec![zs[0].clone(), zs[0].clone(), zs[1].clone()];
        let mut g = Graph::new();
        let vars: Vec<Var> = lps.iter().map(|t| g.input(t.clone())).collect();
        let out = masked_pss_loss(&mut g, &vars, &dup, &m, 1.0, PitMethod::Brute).unwrap();
        let pi = &out.assignment.pi;
        // Swapping the two identical targets ties; the smaller permutation wins.
        let pos0 = pi.iter().position(|&i| i == 0).unwrap();
        let pos1 = pi.iter().position(|&i| i == 1).unwrap();
        assert!(pos0 < pos1);
    }

    #[test]
    fn pss_gradient_only_through_chosen_pairs() {
        let mut r = keyed(3, &[]);
        let lps: Vec<Tensor> = (0..2).map(|_| random_lp(10, 4, &mut r)).collect();
        let zs: Vec<UnitSequence> = (0..2).map(|_| random_units(10, 4, &mut r)).collect();
        let m = MaskSet::from_indices(10, &[1, 2, 3]);
        let mut g = Graph::new();
        let vars: Vec<Var> = lps.iter().map(|t| g.input(t.clone())).collect();
        let out = masked_pss_loss(&mut g, &vars, &zs, &m, 1.0, PitMethod::Brute).unwrap();
        let grads = g.backward(out.loss).unwrap();
        for (j, &v) in vars.iter().enumerate() {
            let gj = grads.of(v).unwrap();
            let z = &zs[out.assignment.pi[j]];
            for t in 0..10 {
                for u in 0..4 {
                    let want = if m.masked[t] && z.units[t] as usize == u { -1.0 / 6.0 } else { 0.0 };
                    assert!((gj.data()[t * 4 + u] - want).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn pit_ctc_swapped_transcripts() {
        let mut r = keyed(4, &[]);
        let lps: Vec<Tensor> = (0..2).map(|_| random_lp(8, 5, &mut r)).collect();
        let targets = vec![vec![1, 2], vec![3]];
        let run = |t: &[Vec<usize>]| {
            let mut g = Graph::new();
            let vars: Vec<Var> = lps.iter().map(|t| g.input(t.clone())).collect();
            let out = pit_ctc_loss(&mut g, &vars, t, PitMethod::Brute).unwrap();
            (g.scalar(out.loss), out.assignment.pi)
        };
        let (a, pa) = run(&targets);
        let (b, pb) = run(&[targets[1].clone(), targets[0].clone()]);
        assert!((a - b).abs() < 1e-12);
        assert_ne!(pa, pb);
        let (c, _) = run(&[vec![], vec![2]]);
        assert!(c.is_finite());
    }

    #[test]
    fn pit_ctc_all_infeasible_is_error() {
        let mut g = Graph::new();
        let v = g.input(Tensor::full(&[2, 5], -(5f64.ln())));
        let w = g.input(Tensor::full(&[2, 5], -(5f64.ln())));
        let t = vec![vec![1, 2, 3], vec![1, 2, 3]];
        assert!(matches!(
            pit_ctc_loss(&mut g, &[v, w], &t, PitMethod::Brute),
            Err(Error::AllInfeasible)
        ));
    }
}
