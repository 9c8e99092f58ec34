use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::Window;
use crate::error::{Error, Result};
use crate::nets::{group_pool, scene_select, sum_neighbors};
use crate::tensor::{Bound, Tape, Tensor, Var};
use crate::{PedId, Point, DT, FUTURE_LEN, HISTORY_LEN};

use super::{Grouptron, WindowInputs, FEATURE_DIM};

/// Windows decoded together on one tape during prediction.
const PREDICT_CHUNK: usize = 32;

/// The three encoder outputs of one window and their concatenation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MultiScaleEmbedding {
    pub e_his: Vec<f64>,
    pub e_edge: Vec<f64>,
    pub e_scene: Vec<f64>,
    pub e_multi: Vec<f64>,
}

/// Decoder rollout: per-step controls (velocities) and integrated positions
/// relative to the last observed position, each `[rows, 2]`.
pub struct Decoded<'t> {
    pub controls: Vec<Var<'t>>,
    pub positions: Vec<Var<'t>>,
}

/// Training objective and the values of its parts (batch means).
pub struct LossBreakdown<'t> {
    pub total: Var<'t>,
    /// `−E_q[log p(y | x, z)]`.
    pub nll: f64,
    pub kl: f64,
    pub mutual_info: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PredictMode {
    MostLikely,
    /// Decode the `n` categories with the highest prior probability.
    SampleK(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub category: usize,
    /// Log prior probability of the category.
    pub log_weight: f64,
    pub trajectory: Vec<Point>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionOutput {
    pub scene: String,
    pub t0: usize,
    pub node: PedId,
    pub most_likely: Vec<Point>,
    /// Ordered by decreasing prior probability.
    pub samples: Vec<Sample>,
}

/// Indices of the `n` largest values, ties resolved towards lower indices.
pub(crate) fn top_indices(values: &[f64], n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(n);
    idx
}

impl Grouptron {
    /// `e_multi` rows `[B, D]` for a batch of prepared windows.
    pub fn encode_batch<'t>(&self, p: &Bound<'t>, batch: &[&WindowInputs]) -> Result<Var<'t>> {
        if batch.is_empty() {
            return Err(Error::arg("empty batch"));
        }
        let layers = self.layers();
        let tape = p.get("node_lstm.b")?.tape();
        let stack = |seqs: Vec<Var<'t>>| Var::concat(&seqs, 1);

        let histories = stack(batch.iter().map(|w| tape.constant(w.history.clone())).collect())?;
        let e_his = layers.node_lstm.encode(p, histories)?;

        let edge_inputs = batch
            .iter()
            .map(|w| {
                let n: Vec<Var> = w.neighbors.iter().map(|s| tape.constant(s.clone())).collect();
                sum_neighbors(tape, &n, [HISTORY_LEN, 1, FEATURE_DIM])
            })
            .collect::<Result<Vec<_>>>()?;
        let e_edge = layers.edge_lstm.encode(p, stack(edge_inputs)?)?;

        let e_scene = batch
            .iter()
            .map(|w| self.scene_embedding(p, w))
            .collect::<Result<Vec<_>>>()?;
        let e_scene = Var::concat(&e_scene, 0)?;

        let e = Var::concat(&[e_his, e_edge, e_scene], 1)?;
        let expected = [batch.len(), self.config.embedding_dim()];
        if e.shape() != expected {
            return Err(Error::State(format!("e_multi has shape {:?}, expected {expected:?}", e.shape())));
        }
        Ok(e)
    }

    /// Group STGCN per group, mean pooling, scene STGCN, and the node's group at
    /// the last tick: `[1, scene_dim]`.
    fn scene_embedding<'t>(&self, p: &Bound<'t>, w: &WindowInputs) -> Result<Var<'t>> {
        let layers = self.layers();
        let tape = p.get("node_lstm.b")?.tape();
        let pooled = w
            .groups
            .iter()
            .map(|(x, a)| {
                let a = tape.constant(a.clone());
                let mut h = tape.constant(x.clone());
                for block in &layers.group_stgcn {
                    h = block.forward(p, h, a)?;
                }
                let g = group_pool(h)?;
                g.reshape(&[HISTORY_LEN, 1, self.config.scene_dim])
            })
            .collect::<Result<Vec<_>>>()?;
        let a = tape.constant(w.scene_adjacency.clone());
        let mut h = Var::concat(&pooled, 1)?;
        for block in &layers.scene_stgcn {
            h = block.forward(p, h, a)?;
        }
        scene_select(h, w.node_group)?.reshape(&[1, self.config.scene_dim])
    }

    /// Multi-scale embedding of one window.
    pub fn encode(&self, window: &Window) -> Result<MultiScaleEmbedding> {
        let inputs = WindowInputs::prepare(window, &self.config)?;
        self.encode_prepared(&inputs)
    }

    pub fn encode_prepared(&self, inputs: &WindowInputs) -> Result<MultiScaleEmbedding> {
        let tape = Tape::new();
        let p = self.params.bind_frozen(&tape);
        let e = self.encode_batch(&p, &[inputs])?.value().into_data();
        let (h, d) = (self.config.history_dim, self.config.edge_dim);
        Ok(MultiScaleEmbedding {
            e_his: e[..h].to_vec(),
            e_edge: e[h..h + d].to_vec(),
            e_scene: e[h + d..].to_vec(),
            e_multi: e,
        })
    }

    /// Prior logits `[B, K]`.
    pub fn prior_logits<'t>(&self, p: &Bound<'t>, e: Var<'t>) -> Result<Var<'t>> {
        let l = self.layers();
        let hidden = l.prior_hidden.forward(p, e)?.tanh()?;
        l.prior_out.forward(p, hidden)
    }

    /// Posterior logits `[B, K]` from `e_multi` and the true futures.
    pub fn posterior_logits<'t>(&self, p: &Bound<'t>, e: Var<'t>, batch: &[&WindowInputs]) -> Result<Var<'t>> {
        let l = self.layers();
        let tape = e.tape();
        let futures = batch
            .iter()
            .map(|w| {
                w.future
                    .as_ref()
                    .map(|f| tape.constant(f.features.clone()))
                    .ok_or_else(|| Error::arg("window has no ground-truth future"))
            })
            .collect::<Result<Vec<_>>>()?;
        let f = l.future_lstm.encode(p, Var::concat(&futures, 1)?)?;
        let hidden = l.posterior_hidden.forward(p, Var::concat(&[e, f], 1)?)?.tanh()?;
        l.posterior_out.forward(p, hidden)
    }

    /// Unrolls the GRU decoder for `FUTURE_LEN` steps.
    ///
    /// Row `r` decodes window `rows[r].0` of `e: [B, D]` under latent category
    /// `rows[r].1`; `u0: [R, 2]` is the control fed at the first step.
    /// Each step's input is `[e_multi; onehot(z); u_prev]`; the projection of the
    /// first two parts is computed once and reused.
    pub fn decode<'t>(&self, p: &Bound<'t>, e: Var<'t>, rows: &[(usize, usize)], u0: &Tensor) -> Result<Decoded<'t>> {
        let (d, k) = (self.config.embedding_dim(), self.config.k);
        let b = e.shape()[0];
        let r = rows.len();
        if e.shape() != [b, d] || u0.shape() != [r, 2] {
            return Err(Error::arg(format!(
                "decode: e {:?} (D = {d}), u0 {:?} for {r} rows",
                e.shape(),
                u0.shape()
            )));
        }
        if let Some(bad) = rows.iter().find(|(i, z)| *i >= b || *z >= k) {
            return Err(Error::arg(format!("decode row {bad:?} out of range ({b} windows, {k} categories)")));
        }
        let l = self.layers();
        let tape = e.tape();
        let win: Vec<usize> = rows.iter().map(|r| r.0).collect();
        let cat: Vec<usize> = rows.iter().map(|r| r.1).collect();

        let w_ih = p.get("decoder_gru.w_ih")?;
        let fixed = e
            .matmul(w_ih.slice(0, 0, d)?)?
            .index_select(&win)?
            .add(w_ih.slice(0, d, d + k)?.index_select(&cat)?)?
            .add_row(p.get("decoder_gru.b_ih")?)?;
        let w_u = w_ih.slice(0, d + k, d + k + 2)?;

        let w0 = p.get("decoder_h0.w")?;
        let mut h = e
            .matmul(w0.slice(0, 0, d)?)?
            .index_select(&win)?
            .add(w0.slice(0, d, d + k)?.index_select(&cat)?)?
            .add_row(p.get("decoder_h0.b")?)?;

        let mut u = tape.constant(u0.clone());
        let mut pos = tape.constant(Tensor::zeros(vec![r, 2]));
        let mut out = Decoded {
            controls: Vec::with_capacity(FUTURE_LEN),
            positions: Vec::with_capacity(FUTURE_LEN),
        };
        for _ in 0..FUTURE_LEN {
            let gi = fixed.add(u.matmul(w_u)?)?;
            h = l.decoder_gru.step_projected(p, h, gi)?;
            u = l.decoder_head.forward(p, h)?;
            pos = pos.add(u.scale(DT)?)?;
            out.controls.push(u);
            out.positions.push(pos);
        }
        Ok(out)
    }

    /// Negated CVAE objective over a batch:
    /// `mean_i[−Σ_k q_ik log p(y_i | x_i, k) + β KL(q_i ‖ p_i)] − α I_q`,
    /// where the latent code's information is taken from the prior, which
    /// stands in for the posterior: `I = H(mean_i p_i) − mean_i H(p_i)`.
    pub fn loss<'t>(&self, p: &Bound<'t>, batch: &[&WindowInputs]) -> Result<LossBreakdown<'t>> {
        let c = &self.config;
        let (b, k) = (batch.len(), c.k);
        if b < 2 && c.alpha > 0.0 {
            return Err(Error::arg(format!(
                "the mutual-information term needs a batch of at least 2 windows, got {b}"
            )));
        }
        let e = self.encode_batch(p, batch)?;
        let tape = e.tape();
        let prior = self.prior_logits(p, e)?;
        let posterior = self.posterior_logits(p, e, batch)?;

        let rows: Vec<(usize, usize)> = (0..b).flat_map(|i| (0..k).map(move |z| (i, z))).collect();
        let mut u0 = Vec::with_capacity(2 * rows.len());
        for &(i, _) in &rows {
            u0.extend_from_slice(&batch[i].last_velocity);
        }
        let decoded = self.decode(p, e, &rows, &Tensor::new(vec![rows.len(), 2], u0)?)?;

        let mut sq: Option<Var> = None;
        for (t, pos) in decoded.positions.iter().enumerate() {
            let mut y = Vec::with_capacity(2 * rows.len());
            for &(i, _) in &rows {
                let f = batch[i].future.as_ref().expect("checked by posterior_logits");
                y.extend_from_slice(&f.positions[t]);
            }
            let diff = pos.sub(tape.constant(Tensor::new(vec![rows.len(), 2], y)?))?;
            let s = diff.mul(diff)?.sum_axis(1)?;
            sq = Some(match sq {
                None => s,
                Some(acc) => acc.add(s)?,
            });
        }
        let var = c.sigma * c.sigma;
        let norm = (2 * FUTURE_LEN) as f64 * (c.sigma.ln() + 0.5 * (2.0 * std::f64::consts::PI).ln());
        let ll = sq
            .expect("non-empty horizon")
            .scale(-0.5 / var)?
            .add_scalar(-norm)?
            .reshape(&[b, k])?;

        let q = posterior.softmax()?;
        let log_q = posterior.log_softmax()?;
        let log_p = prior.log_softmax()?;
        let inv_b = 1.0 / b as f64;
        let nll = q.mul(ll)?.sum()?.scale(-inv_b)?;
        let kl = q.mul(log_q.sub(log_p)?)?.sum()?.scale(inv_b)?;
        let pz = prior.softmax()?;
        let mean_entropy = pz.mul(log_p)?.sum()?.scale(-inv_b)?;
        let p_bar = pz.mean_axis(0)?;
        let marginal_entropy = p_bar.mul(p_bar.ln()?)?.sum()?.scale(-1.0)?;
        let mutual_info = marginal_entropy.sub(mean_entropy)?;

        let total = nll.add(kl.scale(c.beta)?)?.sub(mutual_info.scale(c.alpha)?)?;
        Ok(LossBreakdown {
            total,
            nll: nll.item()?,
            kl: kl.item()?,
            mutual_info: mutual_info.item()?,
        })
    }

    /// Predicts one window.
    pub fn predict(&self, window: &Window, mode: PredictMode) -> Result<PredictionOutput> {
        let inputs = WindowInputs::prepare(window, &self.config)?;
        let mut out = self.predict_prepared(&[(window, &inputs)], mode)?;
        Ok(out.remove(0))
    }

    /// Predicts many windows, in parallel over fixed-size chunks so that the
    /// result does not depend on the thread count.
    pub fn predict_all(&self, windows: &[Window], mode: PredictMode) -> Result<Vec<PredictionOutput>> {
        let inputs = windows
            .par_iter()
            .map(|w| WindowInputs::prepare(w, &self.config))
            .collect::<Result<Vec<_>>>()?;
        let pairs: Vec<(&Window, &WindowInputs)> = windows.iter().zip(&inputs).collect();
        let chunks = pairs
            .par_chunks(PREDICT_CHUNK)
            .map(|c| self.predict_prepared(c, mode))
            .collect::<Result<Vec<_>>>()?;
        Ok(chunks.into_iter().flatten().collect())
    }

    fn predict_prepared(&self, batch: &[(&Window, &WindowInputs)], mode: PredictMode) -> Result<Vec<PredictionOutput>> {
        let k = self.config.k;
        let n = match mode {
            PredictMode::MostLikely => 1,
            PredictMode::SampleK(n) if (1..=k).contains(&n) => n,
            PredictMode::SampleK(n) => {
                return Err(Error::arg(format!("cannot draw {n} samples from {k} latent categories")))
            }
        };
        let tape = Tape::new();
        let p = self.params.bind_frozen(&tape);
        let inputs: Vec<&WindowInputs> = batch.iter().map(|(_, i)| *i).collect();
        let e = self.encode_batch(&p, &inputs)?;
        let log_prior = self.prior_logits(&p, e)?.log_softmax()?.value();

        let mut rows = Vec::with_capacity(batch.len() * n);
        let mut u0 = Vec::with_capacity(2 * batch.len() * n);
        for (i, w) in inputs.iter().enumerate() {
            let lp = &log_prior.data()[i * k..(i + 1) * k];
            for z in top_indices(lp, n) {
                rows.push((i, z));
                u0.extend_from_slice(&w.last_velocity);
            }
        }
        let decoded = self.decode(&p, e, &rows, &Tensor::new(vec![rows.len(), 2], u0)?)?;
        let steps: Vec<Tensor> = decoded.positions.iter().map(|v| v.value()).collect();

        let mut out = Vec::with_capacity(batch.len());
        for (i, (window, w)) in batch.iter().enumerate() {
            let samples: Vec<Sample> = (0..n)
                .map(|j| {
                    let r = i * n + j;
                    let z = rows[r].1;
                    Sample {
                        category: z,
                        log_weight: log_prior.data()[i * k + z],
                        trajectory: steps
                            .iter()
                            .map(|s| [w.last_position[0] + s.at(&[r, 0]), w.last_position[1] + s.at(&[r, 1])])
                            .collect(),
                    }
                })
                .collect();
            let most_likely = samples[0].trajectory.clone();
            out.push(PredictionOutput {
                scene: window.scene.clone(),
                t0: window.t0,
                node: window.node,
                most_likely,
                samples: if mode == PredictMode::MostLikely { Vec::new() } else { samples },
            });
        }
        Ok(out)
    }
}
