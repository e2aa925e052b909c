//! The training loss on the autodiff tape.
//!
//! For a chunk of segments the model is run once per distinct decision
//! point, then every segment's portfolio path (price move, shrinkage factor,
//! management fee), Sharpe ratio and margin penalty are built from column
//! operations over the chunk. Gradients flow through the whole recursion,
//! including the shrinkage factor and the simulated volumes. The branch of
//! the shrinkage closed form (which asset is sold) is fixed by the forward
//! values, as is the market beta.

use std::collections::BTreeMap;

use super::segments::SegmentSet;
use crate::data::FEATURE_COLUMNS;
use crate::losses::{LossConfig, LossError, LossVariant, MIN_UP_WEIGHT};
use crate::metrics::{MetricsError, MIN_VOLATILITY};
use crate::nn::model::{self, Params};
use crate::nn::{NodeId, Tape, Tensor};
use crate::portfolio::FeeSchedule;

/// Sum of segment losses in a chunk and its parameter gradients, both scaled
/// by `1 / scale`.
#[derive(Debug, Clone)]
pub struct ChunkResult {
    pub loss: f64,
    pub grads: Vec<Tensor>,
    /// Unscaled per-segment losses.
    pub segment_losses: Vec<f64>,
}

/// Loss and gradients for segments `segs`; the returned loss is
/// `Σ_s loss_s / scale`.
pub fn chunk_objective(
    set: &SegmentSet,
    params: &Params,
    segs: &[usize],
    loss: &LossConfig,
    fees: &FeeSchedule,
    scale: f64,
) -> Result<ChunkResult, LossError> {
    let mut tape = Tape::new();
    let (total, per_seg, ids) = build(&mut tape, set, params, segs, loss, fees, scale)?;
    let g = tape.backward(total);
    let grads = ids
        .0
        .iter()
        .zip(params.tensors())
        .map(|(id, p)| {
            g.get(*id)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(p.rows, p.cols))
        })
        .collect();
    Ok(ChunkResult {
        loss: tape.value(total).item(),
        grads,
        segment_losses: per_seg,
    })
}

/// Loss only, evaluated through the same tape graph (used by gradient checks).
pub fn chunk_loss(
    set: &SegmentSet,
    params: &Params,
    segs: &[usize],
    loss: &LossConfig,
    fees: &FeeSchedule,
    scale: f64,
) -> Result<f64, LossError> {
    let mut tape = Tape::new();
    let (total, _, _) = build(&mut tape, set, params, segs, loss, fees, scale)?;
    Ok(tape.value(total).item())
}

fn column(values: impl Iterator<Item = f64>) -> Tensor {
    Tensor::column(values.collect())
}

fn build(
    tape: &mut Tape,
    set: &SegmentSet,
    params: &Params,
    segs: &[usize],
    cfg: &LossConfig,
    fees: &FeeSchedule,
    scale: f64,
) -> Result<(NodeId, Vec<f64>, model::ParamIds), LossError> {
    cfg.validate()?;
    fees.validate()?;
    let t_len = set.seq_len;
    if segs.is_empty() || t_len < 2 {
        return Err(LossError::Shape(format!(
            "{} segments of length {t_len}",
            segs.len()
        )));
    }

    // one model evaluation per distinct decision in the chunk
    let mut rows: BTreeMap<usize, usize> = BTreeMap::new();
    for &s in segs {
        for k in s..s + t_len {
            rows.insert(k, 0);
        }
    }
    for (r, slot) in rows.values_mut().enumerate() {
        *slot = r;
    }
    let windows: Vec<&[f64]> = rows.keys().map(|&k| set.window(k)).collect();
    let x = model::step_major(&windows, set.lookback, FEATURE_COLUMNS);
    let ids = model::param_leaves(tape, params);
    let alloc = model::forward_tape(tape, ids, x, windows.len(), set.lookback);

    let w_up: Vec<NodeId> = (0..t_len)
        .map(|k| {
            let idx = segs.iter().map(|&s| rows[&(s + k)]).collect();
            let w = tape.gather(alloc, idx);
            tape.col(w, 0)
        })
        .collect();
    for &id in &w_up {
        if let Some(&bad) = tape.value(id).data.iter().find(|&&w| w < MIN_UP_WEIGHT) {
            return Err(LossError::DivisionGuard(bad));
        }
    }
    let w_down: Vec<NodeId> = w_up
        .iter()
        .map(|&u| {
            let neg = tape.neg(u);
            tape.add_scalar(neg, 1.0)
        })
        .collect();

    let price = |s: usize, k: usize, a: usize| set.prices[set.anchors[s] + k][a];
    let c = fees.trading_fee;
    let keep = 1.0 - c;
    let penalty_on = cfg.penalty_weight() > 0.0;

    let mut value = tape.leaf(Tensor::filled(segs.len(), 1, 1.0));
    let mut returns = Vec::with_capacity(t_len);
    let mut penalties = Vec::with_capacity(t_len);
    for k in 0..t_len {
        if penalty_on {
            let inv_up = tape.leaf(column(segs.iter().map(|&s| 1.0 / price(s, k, 0))));
            let held = tape.mul(value, w_up[k]);
            let v_up = tape.mul(held, inv_up);
            let ratio = tape.leaf(column(
                segs.iter().map(|&s| -price(s, k, 0) / price(s, k, 1)),
            ));
            let wd_over_wu = tape.div(w_down[k], w_up[k]);
            let beta_model = tape.mul(ratio, wd_over_wu);
            let beta = |g: f64| column(segs.iter().map(move |&s| g * set.beta[s + k]));
            let upper = tape.leaf(beta(1.0 + cfg.gamma));
            let lower = tape.leaf(beta(1.0 - cfg.gamma));
            let c1 = tape.sub(beta_model, upper);
            let c2 = tape.sub(lower, beta_model);
            let v2 = tape.square(v_up);
            let hinge = match cfg.variant {
                LossVariant::L1 => {
                    let prod = tape.mul(c1, c2);
                    let neg = tape.neg(prod);
                    tape.relu(neg)
                }
                _ => {
                    let n1 = tape.neg(c1);
                    let r1 = tape.relu(n1);
                    let n2 = tape.neg(c2);
                    let r2 = tape.relu(n2);
                    let s1 = tape.square(r1);
                    let s2 = tape.square(r2);
                    tape.add(s1, s2)
                }
            };
            penalties.push(tape.mul(v2, hinge));
        }

        let ru = tape.leaf(column(
            segs.iter().map(|&s| price(s, k + 1, 0) / price(s, k, 0)),
        ));
        let rd = tape.leaf(column(
            segs.iter().map(|&s| price(s, k + 1, 1) / price(s, k, 1)),
        ));
        let a_up = tape.mul(w_up[k], ru);
        let a_down = tape.mul(w_down[k], rd);
        let mut factor = tape.add(a_up, a_down);

        if k + 1 < t_len && c > 0.0 {
            let u_prime = tape.div(a_up, factor);
            let u_next = w_up[k + 1];
            let (up_prime, up_next) = (
                tape.value(u_prime).data.clone(),
                tape.value(u_next).data.clone(),
            );
            // sell UP when its drifted weight exceeds the target
            let sell_up: Vec<bool> = up_prime.iter().zip(&up_next).map(|(p, n)| p > n).collect();
            let slope = tape.leaf(column(sell_up.iter().map(|&s| {
                if s {
                    -c * (2.0 - c)
                } else {
                    c * (2.0 - c)
                }
            })));
            let offset = column(
                sell_up
                    .iter()
                    .map(|&s| keep + if s { c } else { -c * keep }),
            );
            let offset_num = tape.leaf(offset.clone());
            let offset_den = tape.leaf(offset);
            let num = tape.mul(slope, u_prime);
            let num = tape.add(num, offset_num);
            let den = tape.mul(slope, u_next);
            let den = tape.add(den, offset_den);
            if let Some(&d) = tape.value(den).data.iter().find(|&&d| d <= 0.0) {
                return Err(crate::portfolio::PortfolioError::Degenerate(d).into());
            }
            let mu = tape.div(num, den);
            factor = tape.mul(factor, mu);
        }
        if fees.management_fee > 0.0 {
            let mf = column(segs.iter().map(|&s| {
                let a = set.anchors[s] + k;
                fees.management_factor(set.times[a], set.times[a + 1])
            }));
            if mf.data.iter().any(|&f| f != 1.0) {
                let mf = tape.leaf(mf);
                factor = tape.mul(factor, mf);
            }
        }
        returns.push(tape.add_scalar(factor, -1.0));
        value = tape.mul(value, factor);
    }

    // per-segment Sharpe with the Bessel-corrected deviation
    let n = t_len as f64;
    let mut sum = returns[0];
    for &r in &returns[1..] {
        sum = tape.add(sum, r);
    }
    let mean = tape.scale(sum, 1.0 / n);
    let mut ss: Option<NodeId> = None;
    for &r in &returns {
        let d = tape.sub(r, mean);
        let d2 = tape.square(d);
        ss = Some(match ss {
            None => d2,
            Some(acc) => tape.add(acc, d2),
        });
    }
    let var = tape.scale(ss.expect("t_len >= 2"), 1.0 / (n - 1.0));
    let std = tape.powf(var, 0.5);
    if let Some(&s) = tape
        .value(std)
        .data
        .iter()
        .find(|&&s| s.is_nan() || s < MIN_VOLATILITY)
    {
        return Err(MetricsError::ZeroVolatility(s).into());
    }
    let sharpe = tape.div(mean, std);
    let mut seg_loss = tape.neg(sharpe);
    if penalty_on {
        let mut total = penalties[0];
        for &p in &penalties[1..] {
            total = tape.add(total, p);
        }
        let weighted = tape.scale(total, cfg.xi / n);
        seg_loss = tape.add(seg_loss, weighted);
    }
    let per_seg = tape.value(seg_loss).data.clone();
    let s = tape.sum(seg_loss);
    let total = tape.scale(s, 1.0 / scale);
    Ok((total, per_seg, ids))
}
