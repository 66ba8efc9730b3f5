//! Pretrained skill models: a conditional skill-embedding VAE plus the
//! state-conditioned priors, discriminator, and progress regressor
//! that downstream matching and RL consume frozen.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ckpt::{load_params, save_params, CkptError};
use crate::data::{one_hot, Dataset};
use crate::rng::stream;
use crate::tensor::dist::{
    nodes_gauss_head, nodes_gauss_kl_std, nodes_gauss_nll, nodes_reparam,
};
use crate::tensor::nets::{GruEncoder, Mlp, Norm};
use crate::tensor::{
    DualVariable, GaussDist, Graph, NodeId, OptVariant, ParamSet, Tensor, TensorError,
    LOGVAR_MAX, LOGVAR_MIN,
};

pub mod priors;

pub use priors::{
    Discriminator, DiscConfig, ExecPrior, ExecPriorConfig, PriorConfig, ProgressConfig,
    ProgressModel, SemanticPrior,
};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("training pool is empty: {0}")]
    EmptyPool(String),
    #[error("degenerate dataset: {0}")]
    Degenerate(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Ckpt(#[from] CkptError),
}

/// Fixed-length skill execution window: `horizon` aligned steps of one
/// labeled segment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowRef {
    pub ds: usize,
    pub traj: usize,
    pub start: usize,
    pub skill: usize,
}

/// Every horizon-length window that fits inside a single-label run.
pub fn window_pool(datasets: &[&Dataset], horizon: usize) -> Vec<WindowRef> {
    let mut pool = Vec::new();
    for (d, ds) in datasets.iter().enumerate() {
        for (i, traj) in ds.trajectories.iter().enumerate() {
            for (start, len, skill) in traj.runs() {
                if len < horizon {
                    continue;
                }
                for t in start..=start + len - horizon {
                    pool.push(WindowRef { ds: d, traj: i, start: t, skill });
                }
            }
        }
    }
    pool
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VaeConfig {
    pub obs_dim: usize,
    pub action_dim: usize,
    pub n_skills: usize,
    pub latent: usize,
    pub horizon: usize,
    pub gru_hidden: usize,
    pub dec_hidden: usize,
    /// Dual target for the window KL, in nats.
    pub kl_target: f64,
    pub beta_init: f64,
    pub beta_lr: f64,
    pub tune_beta: bool,
    /// Latent-free variant: a deterministic action head trained with
    /// squared error, no encoder.
    pub deterministic: bool,
    pub lr: f64,
    pub batch: usize,
    pub steps: usize,
}

impl VaeConfig {
    pub fn defaults(obs_dim: usize, action_dim: usize, n_skills: usize) -> Self {
        VaeConfig {
            obs_dim,
            action_dim,
            n_skills,
            latent: 4,
            horizon: 10,
            gru_hidden: 32,
            dec_hidden: 64,
            kl_target: 2.5,
            beta_init: 0.1,
            beta_lr: 3e-3,
            tune_beta: true,
            deterministic: false,
            lr: 1e-3,
            batch: 64,
            steps: 1500,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct VaeStats {
    pub step: usize,
    pub recon: f64,
    pub kl: f64,
    pub beta: f64,
}

/// Conditional skill VAE: a GRU posterior over windows and an action
/// decoder with a learned state-independent variance. The
/// deterministic variant drops the latent entirely.
pub struct SkillVae {
    pub cfg: VaeConfig,
    pub params: ParamSet,
    pub beta: DualVariable,
}

impl SkillVae {
    fn enc_in(cfg: &VaeConfig) -> usize {
        cfg.obs_dim + cfg.action_dim + cfg.n_skills
    }

    fn dec_in(cfg: &VaeConfig) -> usize {
        let z = if cfg.deterministic { 0 } else { cfg.latent };
        cfg.obs_dim + cfg.n_skills + z
    }

    fn gru(&self) -> GruEncoder {
        GruEncoder::new("enc.gru", Self::enc_in(&self.cfg), self.cfg.gru_hidden)
    }

    fn head(&self) -> Mlp {
        Mlp::new("enc.head", &[self.cfg.gru_hidden, 2 * self.cfg.latent], Norm::None)
    }

    fn dec(&self) -> Mlp {
        let c = &self.cfg;
        Mlp::new("dec.mlp", &[Self::dec_in(c), c.dec_hidden, c.dec_hidden, c.action_dim], Norm::None)
    }

    pub fn new(cfg: VaeConfig, seed: u64) -> Self {
        let beta = DualVariable::new(cfg.beta_init, cfg.kl_target, cfg.beta_lr);
        let mut vae = SkillVae { cfg, params: ParamSet::new(), beta };
        let mut rng = stream(seed, "vae-init");
        if !vae.cfg.deterministic {
            vae.gru().init(&mut vae.params, &mut rng);
            vae.head().init(&mut vae.params, &mut rng);
            let act = vae.cfg.action_dim;
            vae.params.insert("dec.logvar", Tensor::full(1, act, -1.0));
        }
        vae.dec().init(&mut vae.params, &mut rng);
        vae
    }

    // ── batch assembly ──────────────────────────────────────────────

    fn gather_batch(
        &self,
        datasets: &[&Dataset],
        refs: &[WindowRef],
    ) -> (Vec<Tensor>, Vec<Tensor>, Vec<Tensor>, Tensor) {
        let c = &self.cfg;
        let b = refs.len();
        let mut enc_steps = Vec::with_capacity(c.horizon);
        let mut obs_t = Vec::with_capacity(c.horizon);
        let mut act_t = Vec::with_capacity(c.horizon);
        for t in 0..c.horizon {
            let mut enc_rows = Vec::with_capacity(b);
            let mut o_rows = Vec::with_capacity(b);
            let mut a_rows = Vec::with_capacity(b);
            for w in refs {
                let traj = &datasets[w.ds].trajectories[w.traj];
                let o = &traj.obs[w.start + t];
                let a = &traj.actions[w.start + t];
                let mut row = Vec::with_capacity(Self::enc_in(c));
                row.extend_from_slice(o);
                row.extend_from_slice(a);
                row.extend_from_slice(&one_hot(w.skill, c.n_skills));
                enc_rows.push(row);
                o_rows.push(o.clone());
                a_rows.push(a.clone());
            }
            enc_steps.push(Tensor::from_rows(&enc_rows));
            obs_t.push(Tensor::from_rows(&o_rows));
            act_t.push(Tensor::from_rows(&a_rows));
        }
        let onehot_rows: Vec<Vec<f64>> =
            refs.iter().map(|w| one_hot(w.skill, c.n_skills)).collect();
        (enc_steps, obs_t, act_t, Tensor::from_rows(&onehot_rows))
    }

    /// Builds the full ELBO graph for one batch. Returns
    /// `(graph, loss, recon, kl)`; `recon` is per-step NLL, `kl` the
    /// per-window posterior KL to the standard normal.
    fn loss_graph(
        &self,
        params: &ParamSet,
        enc_steps: &[Tensor],
        obs_t: &[Tensor],
        act_t: &[Tensor],
        onehot: &Tensor,
        eps: &Tensor,
        beta: f64,
    ) -> (Graph, NodeId, NodeId, NodeId) {
        assert!(!self.cfg.deterministic);
        let c = &self.cfg;
        let b = onehot.shape().0;
        let mut g = Graph::new();
        let step_nodes: Vec<NodeId> = enc_steps.iter().map(|t| g.input(t.clone())).collect();
        let h = self.gru().encode(&mut g, params, &step_nodes, true);
        let head_out = self.head().forward(&mut g, params, h, true);
        let (mean, logvar) = nodes_gauss_head(&mut g, head_out);
        let eps_node = g.input(eps.clone());
        let z = nodes_reparam(&mut g, mean, logvar, eps_node);
        let kl_rows = nodes_gauss_kl_std(&mut g, (mean, logvar));
        let kl = g.mean(kl_rows);

        let onehot_node = g.input(onehot.clone());
        let lv_raw = g.param(params, "dec.logvar");
        let lv = g.clamp(lv_raw, LOGVAR_MIN, LOGVAR_MAX);
        let zeros = g.input(Tensor::zeros(b, c.action_dim));
        let lv_b = g.add_row(zeros, lv);
        let mut nll_total: Option<NodeId> = None;
        for t in 0..c.horizon {
            let o = g.input(obs_t[t].clone());
            let x = g.concat_cols(&[o, onehot_node, z]);
            let mean_a = self.dec().forward(&mut g, params, x, true);
            let target = g.input(act_t[t].clone());
            let nll = nodes_gauss_nll(&mut g, mean_a, lv_b, target);
            nll_total = Some(match nll_total {
                None => nll,
                Some(acc) => g.add(acc, nll),
            });
        }
        let nll_mean = g.mean(nll_total.expect("horizon > 0"));
        let recon = g.scale(nll_mean, 1.0 / c.horizon as f64);
        let weighted = g.scale(kl, beta);
        let loss = g.add(recon, weighted);
        (g, loss, recon, kl)
    }

    pub fn train(
        &mut self,
        datasets: &[&Dataset],
        seed: u64,
    ) -> Result<Vec<VaeStats>, ModelError> {
        if self.cfg.deterministic {
            return self.train_deterministic(datasets, seed);
        }
        let pool = window_pool(datasets, self.cfg.horizon);
        if pool.is_empty() {
            return Err(ModelError::EmptyPool(format!(
                "no runs of length >= {}",
                self.cfg.horizon
            )));
        }
        let mut rng = stream(seed, "vae-train");
        let mut trace = Vec::new();
        for step in 0..self.cfg.steps {
            let refs: Vec<WindowRef> =
                (0..self.cfg.batch).map(|_| pool[rng.gen_range(0..pool.len())]).collect();
            let (enc_steps, obs_t, act_t, onehot) = self.gather_batch(datasets, &refs);
            let eps = normal_tensor(refs.len(), self.cfg.latent, &mut rng);
            let beta = self.beta.value();
            let (mut g, loss, recon, kl) =
                self.loss_graph(&self.params, &enc_steps, &obs_t, &act_t, &onehot, &eps, beta);
            let recon_v = g.value(recon).item();
            let kl_v = g.value(kl).item();
            let grads = g.backward(loss)?;
            self.params.step(&grads.by_param, self.cfg.lr, OptVariant::RAdam)?;
            if self.cfg.tune_beta {
                self.beta.update(kl_v)?;
            }
            if step % 25 == 0 || step + 1 == self.cfg.steps {
                trace.push(VaeStats { step, recon: recon_v, kl: kl_v, beta });
            }
        }
        Ok(trace)
    }

    /// Latent-free variant: squared-error regression of actions on
    /// `(state, skill)` pairs.
    fn train_deterministic(
        &mut self,
        datasets: &[&Dataset],
        seed: u64,
    ) -> Result<Vec<VaeStats>, ModelError> {
        let mut pairs: Vec<(usize, usize, usize)> = Vec::new();
        for (d, ds) in datasets.iter().enumerate() {
            for (i, traj) in ds.trajectories.iter().enumerate() {
                for t in 0..traj.len() {
                    pairs.push((d, i, t));
                }
            }
        }
        if pairs.is_empty() {
            return Err(ModelError::EmptyPool("no steps".into()));
        }
        let c = self.cfg.clone();
        let mut rng = stream(seed, "vae-train-det");
        let mut trace = Vec::new();
        for step in 0..c.steps {
            let mut x_rows = Vec::with_capacity(c.batch);
            let mut y_rows = Vec::with_capacity(c.batch);
            for _ in 0..c.batch {
                let (d, i, t) = pairs[rng.gen_range(0..pairs.len())];
                let traj = &datasets[d].trajectories[i];
                let mut row = traj.obs[t].clone();
                row.extend_from_slice(&one_hot(traj.skills[t], c.n_skills));
                x_rows.push(row);
                y_rows.push(traj.actions[t].clone());
            }
            let mut g = Graph::new();
            let x = g.input(Tensor::from_rows(&x_rows));
            let pred = self.dec().forward(&mut g, &self.params, x, true);
            let target = g.input(Tensor::from_rows(&y_rows));
            let d = g.sub(pred, target);
            let d2 = g.square(d);
            let rows = g.sum_rows(d2);
            let loss = g.mean(rows);
            let loss_v = g.value(loss).item();
            let grads = g.backward(loss)?;
            self.params.step(&grads.by_param, c.lr, OptVariant::RAdam)?;
            if step % 25 == 0 || step + 1 == c.steps {
                trace.push(VaeStats { step, recon: loss_v, kl: 0.0, beta: 0.0 });
            }
        }
        Ok(trace)
    }

    // ── inference ───────────────────────────────────────────────────

    /// Posterior over the window's latent, run without the tape.
    pub fn encode(&self, obs: &[Vec<f64>], actions: &[Vec<f64>], skill: usize) -> GaussDist {
        assert!(!self.cfg.deterministic, "latent-free model has no encoder");
        let c = &self.cfg;
        assert!(obs.len() >= c.horizon && actions.len() >= c.horizon);
        let steps: Vec<Tensor> = (0..c.horizon)
            .map(|t| {
                let mut row = Vec::with_capacity(Self::enc_in(c));
                row.extend_from_slice(&obs[t]);
                row.extend_from_slice(&actions[t]);
                row.extend_from_slice(&one_hot(skill, c.n_skills));
                Tensor::row_vec(row)
            })
            .collect();
        let h = self.gru().encode_plain(&self.params, &steps);
        let head = self.head().forward_plain(&self.params, &h);
        GaussDist::from_head(&head)
    }

    fn dec_input(&self, obs: &[f64], skill: usize, z: &[f64]) -> Tensor {
        let c = &self.cfg;
        let mut row = Vec::with_capacity(Self::dec_in(c));
        row.extend_from_slice(obs);
        row.extend_from_slice(&one_hot(skill, c.n_skills));
        if !c.deterministic {
            assert_eq!(z.len(), c.latent);
            row.extend_from_slice(z);
        }
        Tensor::row_vec(row)
    }

    /// Decoded action mean; execution uses this directly.
    pub fn decode_mean(&self, obs: &[f64], skill: usize, z: &[f64]) -> Vec<f64> {
        let x = self.dec_input(obs, skill, z);
        self.dec().forward_plain(&self.params, &x).row(0).to_vec()
    }

    /// Full decoded action distribution (mean plus the learned
    /// state-independent variance).
    pub fn decode_dist(&self, obs: &[f64], skill: usize, z: &[f64]) -> GaussDist {
        assert!(!self.cfg.deterministic);
        let x = self.dec_input(obs, skill, z);
        let mean = self.dec().forward_plain(&self.params, &x);
        let lv = self.params.get("dec.logvar").expect("dec.logvar");
        let mut logvar = lv.clone();
        for v in &mut logvar.data {
            *v = v.clamp(LOGVAR_MIN, LOGVAR_MAX);
        }
        GaussDist { mean, logvar }
    }

    // ── persistence ─────────────────────────────────────────────────

    pub fn save(&self, path: &std::path::Path) -> Result<(), CkptError> {
        let meta = serde_json::json!({
            "config": self.cfg,
            "beta": self.beta.value(),
        });
        save_params(path, "skill-vae", &meta, &self.params)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, CkptError> {
        let (params, meta) = load_params(path, "skill-vae")?;
        let cfg: VaeConfig = serde_json::from_value(meta["config"].clone())
            .map_err(|e| CkptError::Format(format!("config meta: {e}")))?;
        let beta_v = meta["beta"].as_f64().unwrap_or(cfg.beta_init);
        let beta = DualVariable::new(beta_v.max(1e-12), cfg.kl_target, cfg.beta_lr);
        Ok(SkillVae { cfg, params, beta })
    }
}

pub(crate) fn normal_tensor(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let data: Vec<f64> = (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::from_vec(rows, cols, data)
}
