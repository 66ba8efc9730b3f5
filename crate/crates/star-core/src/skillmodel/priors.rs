//! Frozen-consumer models around the skill VAE: semantic skill
//! classifiers, the execution prior over latents, the demonstration
//! discriminator, and the progress regressor.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{window_pool, ModelError, SkillVae};
use crate::ckpt::{load_params, save_params, CkptError};
use crate::data::{one_hot, Dataset};
use crate::rng::stream;
use crate::tensor::dist::{nodes_gauss_head, nodes_gauss_kl};
use crate::tensor::nets::{Mlp, Norm};
use crate::tensor::{CatDist, GaussDist, Graph, OptVariant, ParamSet, Tensor};

pub(crate) fn mlp_sizes(in_dim: usize, hidden: usize, layers: usize, out_dim: usize) -> Vec<usize> {
    let mut sizes = vec![in_dim];
    sizes.extend(std::iter::repeat(hidden).take(layers));
    sizes.push(out_dim);
    sizes
}

// ── semantic skill prior p(k | s) ───────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PriorConfig {
    pub obs_dim: usize,
    pub n_skills: usize,
    pub hidden: usize,
    pub layers: usize,
    pub lr: f64,
    pub batch: usize,
    pub steps: usize,
    pub holdout_frac: f64,
}

impl PriorConfig {
    pub fn defaults(obs_dim: usize, n_skills: usize) -> Self {
        PriorConfig {
            obs_dim,
            n_skills,
            hidden: 64,
            layers: 3,
            lr: 1e-3,
            batch: 64,
            steps: 900,
            holdout_frac: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct PriorStats {
    pub first_loss: f64,
    pub last_loss: f64,
    pub holdout_accuracy: f64,
}

/// Categorical skill classifier over single states, trained with
/// cross-entropy on labeled steps.
pub struct SemanticPrior {
    pub cfg: PriorConfig,
    pub params: ParamSet,
}

impl SemanticPrior {
    fn mlp(&self) -> Mlp {
        let c = &self.cfg;
        Mlp::new("sem.mlp", &mlp_sizes(c.obs_dim, c.hidden, c.layers, c.n_skills), Norm::None)
    }

    pub fn new(cfg: PriorConfig, seed: u64) -> Self {
        let mut prior = SemanticPrior { cfg, params: ParamSet::new() };
        let mut rng = stream(seed, "sem-init");
        prior.mlp().init(&mut prior.params, &mut rng);
        prior
    }

    pub fn train(
        &mut self,
        samples: &[(Vec<f64>, usize)],
        seed: u64,
    ) -> Result<PriorStats, ModelError> {
        if samples.is_empty() {
            return Err(ModelError::EmptyPool("no labeled states".into()));
        }
        let mut distinct: Vec<usize> = samples.iter().map(|(_, k)| *k).collect();
        distinct.sort_unstable();
        distinct.dedup();
        if distinct.len() < 2 {
            return Err(ModelError::Degenerate(format!(
                "all {} states share label {}; a one-class prior is useless",
                samples.len(),
                distinct[0]
            )));
        }
        let mut rng = stream(seed, "sem-train");
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut rng);
        let n_hold = ((samples.len() as f64 * self.cfg.holdout_frac) as usize)
            .min(samples.len() - 1)
            .max(1);
        let (hold, train) = order.split_at(n_hold);

        let mut first_loss = f64::NAN;
        let mut last_loss = f64::NAN;
        for step in 0..self.cfg.steps {
            let mut rows = Vec::with_capacity(self.cfg.batch);
            let mut labels = Vec::with_capacity(self.cfg.batch);
            for _ in 0..self.cfg.batch {
                let i = train[rng.gen_range(0..train.len())];
                rows.push(samples[i].0.clone());
                labels.push(samples[i].1);
            }
            let mut g = Graph::new();
            let x = g.input(Tensor::from_rows(&rows));
            let logits = self.mlp().forward(&mut g, &self.params, x, true);
            let lp = g.log_softmax_rows(logits);
            let picked = g.take_per_row(lp, &labels);
            let mean_lp = g.mean(picked);
            let loss = g.neg(mean_lp);
            let loss_v = g.value(loss).item();
            if step == 0 {
                first_loss = loss_v;
            }
            last_loss = loss_v;
            let grads = g.backward(loss)?;
            self.params.step(&grads.by_param, self.cfg.lr, OptVariant::RAdam)?;
        }

        let mut correct = 0;
        for &i in hold {
            let (obs, k) = &samples[i];
            let lp = self.log_probs(obs);
            let argmax = lp
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            if argmax == *k {
                correct += 1;
            }
        }
        Ok(PriorStats {
            first_loss,
            last_loss,
            holdout_accuracy: correct as f64 / hold.len() as f64,
        })
    }

    pub fn log_probs(&self, obs: &[f64]) -> Vec<f64> {
        let x = Tensor::row_vec(obs.to_vec());
        let logits = self.mlp().forward_plain(&self.params, &x);
        crate::tensor::dist::log_softmax(logits.row(0))
    }

    pub fn probs(&self, obs: &[f64]) -> Vec<f64> {
        self.log_probs(obs).iter().map(|l| l.exp()).collect()
    }

    pub fn dist(&self, obs: &[f64]) -> CatDist {
        let x = Tensor::row_vec(obs.to_vec());
        CatDist::new(self.mlp().forward_plain(&self.params, &x))
    }

    /// Batched probabilities, one row per observation.
    pub fn probs_rows(&self, obs: &[Vec<f64>]) -> Tensor {
        let x = Tensor::from_rows(obs);
        let logits = self.mlp().forward_plain(&self.params, &x);
        let mut out = Tensor::zeros(logits.rows, logits.cols);
        for r in 0..logits.rows {
            let p = crate::tensor::dist::softmax(logits.row(r));
            out.data[r * logits.cols..(r + 1) * logits.cols].copy_from_slice(&p);
        }
        out
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), CkptError> {
        save_params(path, "semantic-prior", &serde_json::json!({"config": self.cfg}), &self.params)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, CkptError> {
        let (params, meta) = load_params(path, "semantic-prior")?;
        let cfg: PriorConfig = serde_json::from_value(meta["config"].clone())
            .map_err(|e| CkptError::Format(format!("config meta: {e}")))?;
        Ok(SemanticPrior { cfg, params })
    }
}

// ── execution prior p(z | s, k) ─────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExecPriorConfig {
    pub obs_dim: usize,
    pub n_skills: usize,
    pub latent: usize,
    pub hidden: usize,
    pub layers: usize,
    pub lr: f64,
    pub batch: usize,
    pub steps: usize,
}

impl ExecPriorConfig {
    pub fn defaults(obs_dim: usize, n_skills: usize, latent: usize) -> Self {
        ExecPriorConfig {
            obs_dim,
            n_skills,
            latent,
            hidden: 64,
            layers: 3,
            lr: 1e-3,
            batch: 64,
            steps: 900,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ExecPriorStats {
    pub first_kl: f64,
    pub last_kl: f64,
}

/// Gaussian prior over skill latents given the state where execution
/// starts. Trained to sit under the frozen posterior: the KL is taken
/// from the (constant) encoder output to the prior's prediction.
pub struct ExecPrior {
    pub cfg: ExecPriorConfig,
    pub params: ParamSet,
}

impl ExecPrior {
    fn mlp(&self) -> Mlp {
        let c = &self.cfg;
        Mlp::new(
            "exec.mlp",
            &mlp_sizes(c.obs_dim + c.n_skills, c.hidden, c.layers, 2 * c.latent),
            Norm::None,
        )
    }

    pub fn new(cfg: ExecPriorConfig, seed: u64) -> Self {
        let mut prior = ExecPrior { cfg, params: ParamSet::new() };
        let mut rng = stream(seed, "exec-init");
        prior.mlp().init(&mut prior.params, &mut rng);
        prior
    }

    /// Core trainer over explicit `(state, skill, target posterior)`
    /// triples; the targets enter as constants.
    pub fn train_on(
        &mut self,
        items: &[(Vec<f64>, usize, GaussDist)],
        seed: u64,
    ) -> Result<ExecPriorStats, ModelError> {
        if items.is_empty() {
            return Err(ModelError::EmptyPool("no posterior targets".into()));
        }
        let mut rng = stream(seed, "exec-train");
        let mut first_kl = f64::NAN;
        let mut last_kl = f64::NAN;
        let c = self.cfg.clone();
        for step in 0..c.steps {
            let mut rows = Vec::with_capacity(c.batch);
            let mut qm = Vec::with_capacity(c.batch);
            let mut qlv = Vec::with_capacity(c.batch);
            for _ in 0..c.batch {
                let (obs, k, q) = &items[rng.gen_range(0..items.len())];
                let mut row = obs.clone();
                row.extend_from_slice(&one_hot(*k, c.n_skills));
                rows.push(row);
                qm.push(q.mean.row(0).to_vec());
                qlv.push(q.logvar.row(0).to_vec());
            }
            let mut g = Graph::new();
            let x = g.input(Tensor::from_rows(&rows));
            let head = self.mlp().forward(&mut g, &self.params, x, true);
            let (pm, plv) = nodes_gauss_head(&mut g, head);
            let qm_node = g.input(Tensor::from_rows(&qm));
            let qlv_node = g.input(Tensor::from_rows(&qlv));
            let kl_rows = nodes_gauss_kl(&mut g, (qm_node, qlv_node), (pm, plv));
            let loss = g.mean(kl_rows);
            let loss_v = g.value(loss).item();
            if step == 0 {
                first_kl = loss_v;
            }
            last_kl = loss_v;
            let grads = g.backward(loss)?;
            self.params.step(&grads.by_param, c.lr, OptVariant::RAdam)?;
        }
        Ok(ExecPriorStats { first_kl, last_kl })
    }

    /// Builds posterior targets by running the frozen encoder over
    /// every window in the datasets, then trains on them.
    pub fn train(
        &mut self,
        vae: &SkillVae,
        datasets: &[&Dataset],
        seed: u64,
    ) -> Result<ExecPriorStats, ModelError> {
        let pool = window_pool(datasets, vae.cfg.horizon);
        if pool.is_empty() {
            return Err(ModelError::EmptyPool(format!(
                "no runs of length >= {}",
                vae.cfg.horizon
            )));
        }
        // cap the oracle pass; windows beyond this add little
        let mut rng = stream(seed, "exec-targets");
        let cap = 6000.min(pool.len());
        let mut picks = pool;
        picks.shuffle(&mut rng);
        picks.truncate(cap);
        let items: Vec<(Vec<f64>, usize, GaussDist)> = picks
            .iter()
            .map(|w| {
                let traj = &datasets[w.ds].trajectories[w.traj];
                let obs = &traj.obs[w.start..w.start + vae.cfg.horizon];
                let acts = &traj.actions[w.start..w.start + vae.cfg.horizon];
                let q = vae.encode(obs, acts, w.skill);
                (traj.obs[w.start].clone(), w.skill, q)
            })
            .collect();
        self.train_on(&items, seed)
    }

    pub fn dist(&self, obs: &[f64], skill: usize) -> GaussDist {
        let mut row = obs.to_vec();
        row.extend_from_slice(&one_hot(skill, self.cfg.n_skills));
        let head = self.mlp().forward_plain(&self.params, &Tensor::row_vec(row));
        GaussDist::from_head(&head)
    }

    /// Batched [`dist`]: one prior per `(state, skill)` pair.
    pub fn dist_rows(&self, obs: &[Vec<f64>], skills: &[usize]) -> GaussDist {
        assert_eq!(obs.len(), skills.len(), "one skill per state");
        let rows: Vec<Vec<f64>> = obs
            .iter()
            .zip(skills)
            .map(|(o, &k)| {
                let mut row = o.clone();
                row.extend_from_slice(&one_hot(k, self.cfg.n_skills));
                row
            })
            .collect();
        let head = self.mlp().forward_plain(&self.params, &Tensor::from_rows(&rows));
        GaussDist::from_head(&head)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), CkptError> {
        save_params(path, "exec-prior", &serde_json::json!({"config": self.cfg}), &self.params)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, CkptError> {
        let (params, meta) = load_params(path, "exec-prior")?;
        let cfg: ExecPriorConfig = serde_json::from_value(meta["config"].clone())
            .map_err(|e| CkptError::Format(format!("config meta: {e}")))?;
        Ok(ExecPrior { cfg, params })
    }
}

// ── demonstration discriminator D(s) ────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiscConfig {
    pub obs_dim: usize,
    pub hidden: usize,
    pub lr: f64,
    pub batch: usize,
    pub steps: usize,
}

impl DiscConfig {
    pub fn defaults(obs_dim: usize) -> Self {
        DiscConfig { obs_dim, hidden: 32, lr: 1e-3, batch: 64, steps: 600 }
    }
}

/// Binary classifier between demonstration-matched states and ordinary
/// ones. Two small plain layers, no normalization; every batch is
/// balanced half and half regardless of pool sizes.
pub struct Discriminator {
    pub cfg: DiscConfig,
    pub params: ParamSet,
}

impl Discriminator {
    fn mlp(&self) -> Mlp {
        let c = &self.cfg;
        Mlp::new("disc.mlp", &[c.obs_dim, c.hidden, c.hidden, 1], Norm::None)
    }

    pub fn new(cfg: DiscConfig, seed: u64) -> Self {
        let mut d = Discriminator { cfg, params: ParamSet::new() };
        let mut rng = stream(seed, "disc-init");
        d.mlp().init(&mut d.params, &mut rng);
        d
    }

    pub fn train(
        &mut self,
        pos: &[Vec<f64>],
        neg: &[Vec<f64>],
        seed: u64,
    ) -> Result<(), ModelError> {
        if pos.is_empty() || neg.is_empty() {
            return Err(ModelError::EmptyPool(format!(
                "discriminator needs both classes ({} pos, {} neg)",
                pos.len(),
                neg.len()
            )));
        }
        let mut rng = stream(seed, "disc-train");
        let half = (self.cfg.batch / 2).max(1);
        for _ in 0..self.cfg.steps {
            let mut rows = Vec::with_capacity(2 * half);
            let mut y = Vec::with_capacity(2 * half);
            for _ in 0..half {
                rows.push(pos[rng.gen_range(0..pos.len())].clone());
                y.push(vec![1.0]);
            }
            for _ in 0..half {
                rows.push(neg[rng.gen_range(0..neg.len())].clone());
                y.push(vec![0.0]);
            }
            let mut g = Graph::new();
            let x = g.input(Tensor::from_rows(&rows));
            let logit = self.mlp().forward(&mut g, &self.params, x, true);
            let y_node = g.input(Tensor::from_rows(&y));
            // bce(l, y) = softplus(l) - l * y, stable in both tails
            let sp = g.softplus(logit);
            let ly = g.mul(logit, y_node);
            let per = g.sub(sp, ly);
            let loss = g.mean(per);
            let grads = g.backward(loss)?;
            self.params.step(&grads.by_param, self.cfg.lr, OptVariant::RAdam)?;
        }
        Ok(())
    }

    /// Raw log-odds; callers clamp before use.
    pub fn logit(&self, obs: &[f64]) -> f64 {
        self.mlp().forward_plain(&self.params, &Tensor::row_vec(obs.to_vec())).item()
    }

    pub fn prob(&self, obs: &[f64]) -> f64 {
        1.0 / (1.0 + (-self.logit(obs)).exp())
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), CkptError> {
        save_params(path, "discriminator", &serde_json::json!({"config": self.cfg}), &self.params)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, CkptError> {
        let (params, meta) = load_params(path, "discriminator")?;
        let cfg: DiscConfig = serde_json::from_value(meta["config"].clone())
            .map_err(|e| CkptError::Format(format!("config meta: {e}")))?;
        Ok(Discriminator { cfg, params })
    }
}

// ── progress regressor P(s) ─────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProgressConfig {
    pub obs_dim: usize,
    pub hidden: usize,
    pub lr: f64,
    pub batch: usize,
    pub steps: usize,
}

impl ProgressConfig {
    pub fn defaults(obs_dim: usize) -> Self {
        ProgressConfig { obs_dim, hidden: 64, lr: 1e-3, batch: 64, steps: 600 }
    }
}

/// Regresses how far through a demonstration a state sits, as a
/// sigmoid-squashed fraction.
pub struct ProgressModel {
    pub cfg: ProgressConfig,
    pub params: ParamSet,
}

impl ProgressModel {
    fn mlp(&self) -> Mlp {
        let c = &self.cfg;
        Mlp::new("prog.mlp", &[c.obs_dim, c.hidden, c.hidden, 1], Norm::None)
    }

    pub fn new(cfg: ProgressConfig, seed: u64) -> Self {
        let mut m = ProgressModel { cfg, params: ParamSet::new() };
        let mut rng = stream(seed, "prog-init");
        m.mlp().init(&mut m.params, &mut rng);
        m
    }

    pub fn train(&mut self, samples: &[(Vec<f64>, f64)], seed: u64) -> Result<(), ModelError> {
        if samples.is_empty() {
            return Err(ModelError::EmptyPool("no progress targets".into()));
        }
        let mut rng = stream(seed, "prog-train");
        for _ in 0..self.cfg.steps {
            let mut rows = Vec::with_capacity(self.cfg.batch);
            let mut y = Vec::with_capacity(self.cfg.batch);
            for _ in 0..self.cfg.batch {
                let (obs, frac) = &samples[rng.gen_range(0..samples.len())];
                rows.push(obs.clone());
                y.push(vec![*frac]);
            }
            let mut g = Graph::new();
            let x = g.input(Tensor::from_rows(&rows));
            let raw = self.mlp().forward(&mut g, &self.params, x, true);
            let pred = g.sigmoid(raw);
            let target = g.input(Tensor::from_rows(&y));
            let d = g.sub(pred, target);
            let d2 = g.square(d);
            let loss = g.mean(d2);
            let grads = g.backward(loss)?;
            self.params.step(&grads.by_param, self.cfg.lr, OptVariant::RAdam)?;
        }
        Ok(())
    }

    pub fn predict(&self, obs: &[f64]) -> f64 {
        let raw = self.mlp().forward_plain(&self.params, &Tensor::row_vec(obs.to_vec())).item();
        1.0 / (1.0 + (-raw).exp())
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), CkptError> {
        save_params(path, "progress", &serde_json::json!({"config": self.cfg}), &self.params)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, CkptError> {
        let (params, meta) = load_params(path, "progress")?;
        let cfg: ProgressConfig = serde_json::from_value(meta["config"].clone())
            .map_err(|e| CkptError::Format(format!("config meta: {e}")))?;
        Ok(ProgressModel { cfg, params })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadrant_samples(n: usize, seed: u64) -> Vec<(Vec<f64>, usize)> {
        let mut rng = stream(seed, "quad");
        (0..n)
            .map(|_| {
                let x: f64 = rng.gen_range(0.0..1.0);
                let y: f64 = rng.gen_range(0.0..1.0);
                let k = (x > 0.5) as usize + 2 * ((y > 0.5) as usize);
                (vec![x, y], k)
            })
            .collect()
    }

    #[test]
    fn semantic_prior_learns_quadrants() {
        let samples = quadrant_samples(2000, 0);
        let mut cfg = PriorConfig::defaults(2, 4);
        cfg.steps = 500;
        let mut prior = SemanticPrior::new(cfg, 1);
        let stats = prior.train(&samples, 2).unwrap();
        assert!(stats.last_loss < stats.first_loss);
        assert!(
            stats.holdout_accuracy > 0.9,
            "holdout accuracy {}",
            stats.holdout_accuracy
        );
        // probabilities are normalized and confident off the borders
        let p = prior.probs(&[0.9, 0.1]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(p[1] > 0.8, "p(k=1 | bottom-right) = {}", p[1]);
    }

    #[test]
    fn semantic_prior_rejects_single_label() {
        let samples: Vec<(Vec<f64>, usize)> =
            (0..50).map(|i| (vec![i as f64 / 50.0, 0.3], 2)).collect();
        let mut prior = SemanticPrior::new(PriorConfig::defaults(2, 4), 3);
        assert!(matches!(prior.train(&samples, 4), Err(ModelError::Degenerate(_))));
    }

    #[test]
    fn batched_probs_match_single() {
        let samples = quadrant_samples(400, 5);
        let mut cfg = PriorConfig::defaults(2, 4);
        cfg.steps = 120;
        let mut prior = SemanticPrior::new(cfg, 6);
        prior.train(&samples, 7).unwrap();
        let obs: Vec<Vec<f64>> = vec![vec![0.2, 0.8], vec![0.6, 0.4]];
        let batch = prior.probs_rows(&obs);
        for (r, o) in obs.iter().enumerate() {
            let single = prior.probs(o);
            for (a, b) in batch.row(r).iter().zip(&single) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn exec_prior_fits_linear_posteriors() {
        // target posterior mean depends linearly on state and skill
        let mut rng = stream(8, "items");
        let items: Vec<(Vec<f64>, usize, GaussDist)> = (0..600)
            .map(|_| {
                let s = vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
                let k = rng.gen_range(0..2usize);
                let sign = if k == 0 { 1.0 } else { -1.0 };
                let mean = Tensor::row_vec(vec![sign * s[0], 0.5 * s[1]]);
                let logvar = Tensor::row_vec(vec![-1.0, -1.0]);
                (s, k, GaussDist { mean, logvar })
            })
            .collect();
        let mut cfg = ExecPriorConfig::defaults(2, 2, 2);
        cfg.steps = 600;
        let mut prior = ExecPrior::new(cfg, 9);
        let stats = prior.train_on(&items, 10).unwrap();
        assert!(stats.last_kl < stats.first_kl * 0.5, "{stats:?}");
        assert!(stats.last_kl < 0.3, "final KL {}", stats.last_kl);
        let d = prior.dist(&[0.8, -0.4], 0);
        assert!((d.mean.at(0, 0) - 0.8).abs() < 0.25);
        assert!((d.mean.at(0, 1) + 0.2).abs() < 0.25);
    }

    #[test]
    fn discriminator_separates_and_balances() {
        let mut rng = stream(11, "disc");
        // 20 positives against 500 negatives: balanced batches must
        // still learn the positive region
        let pos: Vec<Vec<f64>> = (0..20)
            .map(|_| vec![rng.gen_range(0.0..0.4), rng.gen_range(0.0..0.4)])
            .collect();
        let neg: Vec<Vec<f64>> = (0..500)
            .map(|_| vec![rng.gen_range(0.6..1.0), rng.gen_range(0.6..1.0)])
            .collect();
        let mut disc = Discriminator::new(DiscConfig::defaults(2), 12);
        disc.train(&pos, &neg, 13).unwrap();
        assert!(disc.prob(&[0.2, 0.2]) > 0.85);
        assert!(disc.prob(&[0.8, 0.8]) < 0.15);
        // prob is exactly the squashed logit
        let l = disc.logit(&[0.3, 0.25]);
        assert!((disc.prob(&[0.3, 0.25]) - 1.0 / (1.0 + (-l).exp())).abs() < 1e-12);
    }

    #[test]
    fn discriminator_needs_both_classes() {
        let mut disc = Discriminator::new(DiscConfig::defaults(2), 14);
        assert!(matches!(
            disc.train(&[vec![0.1, 0.1]], &[], 15),
            Err(ModelError::EmptyPool(_))
        ));
    }

    #[test]
    fn progress_tracks_position() {
        let mut rng = stream(16, "prog");
        let samples: Vec<(Vec<f64>, f64)> = (0..800)
            .map(|_| {
                let f: f64 = rng.gen_range(0.0..1.0);
                (vec![f, rng.gen_range(0.0..1.0)], f)
            })
            .collect();
        let mut model = ProgressModel::new(ProgressConfig::defaults(2), 17);
        model.train(&samples, 18).unwrap();
        assert!(model.predict(&[0.1, 0.5]) < 0.3);
        assert!(model.predict(&[0.9, 0.5]) > 0.7);
        let early = model.predict(&[0.2, 0.4]);
        let late = model.predict(&[0.8, 0.4]);
        assert!(late > early + 0.3);
    }

    #[test]
    fn prior_checkpoints_roundtrip() {
        let samples = quadrant_samples(300, 19);
        let mut cfg = PriorConfig::defaults(2, 4);
        cfg.steps = 60;
        let mut prior = SemanticPrior::new(cfg, 20);
        prior.train(&samples, 21).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("sem.ckpt");
        prior.save(&p1).unwrap();
        let back = SemanticPrior::load(&p1).unwrap();
        assert_eq!(back.log_probs(&[0.4, 0.7]), prior.log_probs(&[0.4, 0.7]));

        let mut ecfg = ExecPriorConfig::defaults(2, 3, 2);
        ecfg.steps = 5;
        let exec = ExecPrior::new(ecfg, 22);
        let p2 = dir.path().join("exec.ckpt");
        exec.save(&p2).unwrap();
        let eback = ExecPrior::load(&p2).unwrap();
        assert_eq!(eback.dist(&[0.1, 0.2], 1).mean.data, exec.dist(&[0.1, 0.2], 1).mean.data);
        // kinds are enforced across model families
        assert!(SemanticPrior::load(&p2).is_err());
    }
}
