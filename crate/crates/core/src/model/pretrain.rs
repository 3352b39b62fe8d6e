//! Masked-token denoising on the shared bigram chain, producing the
//! "pretrained" initialization for fine-tuning.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::component::{ComponentId, Scope, EMBED_TOKEN};
use super::snapshot::Snapshot;
use super::transformer::{Binder, Model};
use super::vocab::{self, TokenChain, MASK};
use crate::error::{Error, Result};
use crate::numerics::{Graph, Var};
use crate::optim::{lr_at, warmup_steps, AdamW, AdamWHyper, ClipPolicy};
use crate::schedule::apply_step;
use crate::seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_fraction: f64,
    pub mask_rate: f64,
    /// Chance that a corpus position carries a marker token.
    pub marker_rate: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 600,
            batch_size: 16,
            lr: 2e-3,
            warmup_fraction: 0.1,
            mask_rate: 0.3,
            marker_rate: 0.05,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("pretrain.batch_size must be at least 1".into()));
        }
        if !(self.mask_rate > 0.0 && self.mask_rate <= 1.0) {
            return Err(Error::Config(format!(
                "pretrain.mask_rate must lie in (0, 1], got {}",
                self.mask_rate
            )));
        }
        if !(0.0..1.0).contains(&self.marker_rate) {
            return Err(Error::Config(format!(
                "pretrain.marker_rate must lie in [0, 1), got {}",
                self.marker_rate
            )));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config("pretrain.warmup_fraction must lie in [0, 1]".into()));
        }
        AdamWHyper {
            lr: self.lr,
            ..AdamWHyper::default()
        }
        .validate()
    }
}

#[derive(Clone, Debug)]
pub struct Pretrained {
    pub snapshot: Snapshot,
    /// Masked-token loss on a fixed held-out set before and after training.
    pub initial_loss: f64,
    pub final_loss: f64,
    pub losses: Vec<f64>,
}

struct MaskedBatch {
    tokens: Vec<Vec<usize>>,
    /// Flat row index (`b * seq + pos`) of each masked position.
    rows: Vec<usize>,
    targets: Vec<usize>,
}

fn masked_batch<R: Rng>(
    chain: &TokenChain,
    cfg: &PretrainConfig,
    seq: usize,
    rng: &mut R,
) -> MaskedBatch {
    let n_mask = ((seq as f64 * cfg.mask_rate).round() as usize).clamp(1, seq);
    let mut tokens = Vec::with_capacity(cfg.batch_size);
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for b in 0..cfg.batch_size {
        let mut s = chain.sample(seq, rng);
        for t in s.iter_mut() {
            if rng.random_bool(cfg.marker_rate) {
                *t = vocab::marker(rng.random_range(0..vocab::NUM_MARKERS));
            }
        }
        let mut picks = sample(rng, seq, n_mask).into_vec();
        picks.sort_unstable();
        for pos in picks {
            rows.push(b * seq + pos);
            targets.push(s[pos]);
            s[pos] = MASK;
        }
        tokens.push(s);
    }
    MaskedBatch {
        tokens,
        rows,
        targets,
    }
}

fn mlm_loss(model: &Model, graph: &mut Graph, bind: &mut Binder<'_>, batch: &MaskedBatch) -> Result<Var> {
    let seq = batch.tokens[0].len();
    let hidden = model.encode(graph, bind, &batch.tokens, seq)?;
    let picked = graph.gather_rows(hidden, &batch.rows)?;
    let table = bind.get(graph, EMBED_TOKEN)?;
    let logits = graph.matmul_t(picked, table)?;
    graph.cross_entropy(logits, &batch.targets)
}

fn eval_loss(model: &Model, batches: &[MaskedBatch]) -> Result<f64> {
    let mut total = 0.0;
    for b in batches {
        let mut graph = Graph::new();
        let mut bind = Binder::new(model, &|_| false);
        let l = mlm_loss(model, &mut graph, &mut bind, b)?;
        total += graph.value(l).item();
    }
    Ok(total / batches.len() as f64)
}

/// Trains every non-head component for `cfg.steps` AdamW steps. The output
/// embedding is tied to `embed.token`.
pub fn pretrain(model: &mut Model, cfg: &PretrainConfig) -> Result<Pretrained> {
    cfg.validate()?;
    let chain = TokenChain::new(model.config().vocab)?;
    let seq = model.config().max_seq_len;
    let mut eval_rng = seed::rng(seed::derive(cfg.seed, &["pretrain", "eval"]));
    let eval: Vec<MaskedBatch> = (0..4)
        .map(|_| masked_batch(&chain, cfg, seq, &mut eval_rng))
        .collect();
    let initial_loss = eval_loss(model, &eval)?;

    let mut rng = seed::rng(seed::derive(cfg.seed, &["pretrain", "train"]));
    let mut opt = AdamW::new(AdamWHyper {
        lr: cfg.lr,
        ..AdamWHyper::default()
    })?;
    let warmup = warmup_steps(cfg.steps, cfg.warmup_fraction);
    let trainable = |id: &ComponentId| id.scope() != Some(Scope::Head);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch = masked_batch(&chain, cfg, seq, &mut rng);
        let lr = lr_at(step, cfg.steps, warmup, cfg.lr)?;
        let mut graph = Graph::new();
        let (loss, vars) = {
            let mut bind = Binder::new(model, &trainable);
            let loss = mlm_loss(model, &mut graph, &mut bind, &batch)?;
            (loss, bind.trainable_vars(&graph))
        };
        let out = apply_step(model, &graph, &vars, loss, &ClipPolicy::None, &mut opt, lr)?;
        losses.push(out.loss);
    }
    let final_loss = eval_loss(model, &eval)?;
    Ok(Pretrained {
        snapshot: Snapshot::of(model, "pretrained"),
        initial_loss,
        final_loss,
        losses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn tiny() -> (ModelConfig, PretrainConfig) {
        (
            ModelConfig {
                num_layers: 2,
                hidden: 16,
                num_heads: 2,
                ffn: 32,
                vocab: 24,
                max_seq_len: 8,
                num_classes: 2,
                init_std: 0.02,
                seed: 3,
            },
            PretrainConfig {
                steps: 60,
                batch_size: 8,
                ..PretrainConfig::default()
            },
        )
    }

    #[test]
    fn loss_drops_and_is_deterministic() {
        let (mc, pc) = tiny();
        let mut a = Model::new(mc.clone()).unwrap();
        let ra = pretrain(&mut a, &pc).unwrap();
        assert!(ra.final_loss < ra.initial_loss, "{} !< {}", ra.final_loss, ra.initial_loss);
        let keys: Vec<_> = a.component_ids().cloned().collect();
        let snap_keys: Vec<_> = ra.snapshot.params().keys().cloned().collect();
        assert_eq!(keys, snap_keys);

        let mut b = Model::new(mc).unwrap();
        let rb = pretrain(&mut b, &pc).unwrap();
        assert_eq!(ra.snapshot, rb.snapshot);
    }

    #[test]
    fn head_is_left_alone() {
        let (mc, pc) = tiny();
        let mut m = Model::new(mc).unwrap();
        let head = m.param("head.out.weight").unwrap().clone();
        pretrain(&mut m, &pc).unwrap();
        assert_eq!(m.param("head.out.weight").unwrap(), &head);
    }
}
