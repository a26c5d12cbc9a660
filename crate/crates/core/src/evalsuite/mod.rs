//! Zero-shot retrieval, behavior captioning accuracy and exploration
//! usefulness, plus the variant comparison driver.

mod report;

use std::collections::BTreeMap;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::blockworld::{
    is_useful, parse_caption, render_caption, sample_board, Action, BlockSet, BoardState,
    Direction, Trajectory, Vec2, A_MAX, N_BLOCKS, T_MAX,
};
use crate::datastore::{Dataset, DatasetRecord};
use crate::encoders::{reparameterize, GaussianEmbedding};
use crate::error::{ClaspError, Result};
use crate::generator::rollout_with;
use crate::substrate::{Graph, Mode, NoiseKey, ParamStore, Tensor};
use crate::trainer::{fit, fit_prior, ClaspModel, FitOptions, TrainConfig, Trainer};

pub use report::{format_table, parse_csv, to_csv, ResultRow, CSV_HEADER};

/// Recall at each `K`, in both directions.
#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalScores {
    /// For each behavior, rank the captions.
    pub text: Vec<(usize, f64)>,
    /// For each caption, rank the behaviors.
    pub behaviour: Vec<(usize, f64)>,
}

impl RetrievalScores {
    pub fn text_at(&self, k: usize) -> Option<f64> {
        self.text.iter().find(|(kk, _)| *kk == k).map(|x| x.1)
    }

    pub fn behaviour_at(&self, k: usize) -> Option<f64> {
        self.behaviour.iter().find(|(kk, _)| *kk == k).map(|x| x.1)
    }
}

/// 1-based rank of `truth` among `candidates` scored by `score`, higher
/// first, ties going to the lower id.
fn rank_of(truth: usize, n: usize, score: impl Fn(usize) -> f64, ids: &[u64]) -> usize {
    let st = score(truth);
    1 + (0..n)
        .filter(|&j| j != truth)
        .filter(|&j| {
            let s = score(j);
            s > st || (s == st && ids[j] < ids[truth])
        })
        .count()
}

/// R@K from a pool similarity matrix, `sim[i][j]` = behavior `i` against
/// caption `j`, with the true pairs on the diagonal.
pub fn recall_at_k(sim: &Tensor<f64>, ids: &[u64], ks: &[usize]) -> Result<RetrievalScores> {
    let p = sim.rows;
    if sim.cols != p || ids.len() != p {
        return Err(ClaspError::InvalidInput(
            "similarity matrix must be square over the pool".into(),
        ));
    }
    if let Some(&k) = ks.iter().max() {
        if p < k {
            return Err(ClaspError::InvalidInput(format!(
                "pool of {p} is smaller than K = {k}"
            )));
        }
    }
    let text_ranks: Vec<usize> = (0..p)
        .map(|i| rank_of(i, p, |j| sim.get(i, j), ids))
        .collect();
    let beh_ranks: Vec<usize> = (0..p)
        .map(|j| rank_of(j, p, |i| sim.get(i, j), ids))
        .collect();
    let at =
        |ranks: &[usize], k: usize| ranks.iter().filter(|&&r| r <= k).count() as f64 / p as f64;
    Ok(RetrievalScores {
        text: ks.iter().map(|&k| (k, at(&text_ranks, k))).collect(),
        behaviour: ks.iter().map(|&k| (k, at(&beh_ranks, k))).collect(),
    })
}

/// Unit behavior and caption embeddings of `records`. With `sample = Some(seed)`
/// each embedding is a reparameterized draw instead of the normalized mean.
pub fn embed_pool(
    model: &ClaspModel,
    store: &ParamStore<f32>,
    records: &[DatasetRecord],
    sample: Option<u64>,
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let trajs: Vec<&Trajectory> = records.iter().map(|r| &r.trajectory).collect();
    let caps: Vec<Vec<u32>> = records.iter().map(|r| r.caption.clone()).collect();
    let Some(seed) = sample else {
        return Ok((
            model.embed_trajectories(store, &trajs)?,
            model.embed_captions(store, &caps)?,
        ));
    };
    let d = model.d();
    let key = NoiseKey::new(seed, 0);
    let mut g = Graph::new();
    let b = model
        .behavior
        .forward_trajectories(&mut g, store, &trajs, Mode::Eval)?
        .read(&g);
    let mut g = Graph::new();
    let t = model
        .text
        .forward(&mut g, store, &caps, Mode::Eval)?
        .read(&g);
    let (mut zb, mut zl) = (Vec::new(), Vec::new());
    for (i, r) in records.iter().enumerate() {
        zb.extend(draw(
            &b[i],
            key.normal(&format!("eval.b.{}", r.record_id), d),
            model.behavior.distributional,
        )?);
        zl.extend(draw(
            &t[i],
            key.normal(&format!("eval.l.{}", r.record_id), d),
            model.text.distributional,
        )?);
    }
    Ok((
        Tensor::from_vec(records.len(), d, zb),
        Tensor::from_vec(records.len(), d, zl),
    ))
}

/// Reparameterized unit sample; mean-only embeddings ignore the noise.
fn draw(e: &GaussianEmbedding<f32>, eps: Vec<f32>, distributional: bool) -> Result<Vec<f32>> {
    let eps = if distributional {
        eps
    } else {
        vec![0.0; eps.len()]
    };
    Ok(reparameterize(e, &eps)?.z)
}

/// Cross-modal retrieval over `pool`: inner products of unit embeddings.
pub fn retrieval_eval(
    model: &ClaspModel,
    store: &ParamStore<f32>,
    pool: &[DatasetRecord],
    ks: &[usize],
    sample: Option<u64>,
) -> Result<RetrievalScores> {
    if let Some(&k) = ks.iter().max() {
        if pool.len() < k {
            return Err(ClaspError::InvalidInput(format!(
                "pool of {} is smaller than K = {k}",
                pool.len()
            )));
        }
    }
    let (zb, zl) = embed_pool(model, store, pool, sample)?;
    let p = pool.len();
    let d = model.d();
    let mut sim = Tensor::zeros(p, p);
    for i in 0..p {
        for j in 0..p {
            sim.data[i * p + j] = (0..d)
                .map(|c| zb.get(i, c) as f64 * zl.get(j, c) as f64)
                .sum();
        }
    }
    let ids: Vec<u64> = pool.iter().map(|r| r.record_id).collect();
    recall_at_k(&sim, &ids, ks)
}

/// Picks `size` records cycling over the `(color, shape, direction)` groups in
/// shuffled order, so every held-out combination is represented.
pub fn draw_pool(records: &[DatasetRecord], size: usize, seed: u64) -> Result<Vec<DatasetRecord>> {
    if records.len() < size {
        return Err(ClaspError::InsufficientRecords(format!(
            "pool of {size} requested from {} records",
            records.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(3);
    let mut groups: BTreeMap<_, Vec<&DatasetRecord>> = BTreeMap::new();
    for r in records {
        groups.entry(r.factors.triple()).or_default().push(r);
    }
    let mut groups: Vec<Vec<&DatasetRecord>> = groups.into_values().collect();
    groups.shuffle(&mut rng);
    for g in &mut groups {
        g.shuffle(&mut rng);
        g.reverse();
    }
    let mut pool = Vec::with_capacity(size);
    while pool.len() < size {
        for g in groups.iter_mut() {
            if pool.len() == size {
                break;
            }
            if let Some(r) = g.pop() {
                pool.push(r.clone());
            }
        }
    }
    Ok(pool)
}

/// Fraction of records whose decoded caption parses to exactly the true
/// factors. `decode` maps a record to a token sequence.
pub fn caption_accuracy<F>(records: &[DatasetRecord], mut decode: F) -> Result<f64>
where
    F: FnMut(&DatasetRecord) -> Result<Vec<u32>>,
{
    if records.is_empty() {
        return Err(ClaspError::InsufficientRecords(
            "no records to caption".into(),
        ));
    }
    let mut hits = 0usize;
    for r in records {
        if parse_caption(&decode(r)?) == Some(r.factors) {
            hits += 1;
        }
    }
    Ok(hits as f64 / records.len() as f64)
}

/// Beam-decoded caption of one trajectory from its eval-mode embedding.
pub fn describe(
    model: &ClaspModel,
    store: &ParamStore<f32>,
    traj: &Trajectory,
    beam: usize,
) -> Result<Vec<u32>> {
    let z = model.embed_trajectories(store, &[traj])?;
    let prefix = model.captioner.prefix_value(store, &z.data);
    model.captioner.beam_decode(store, &prefix, beam)
}

pub fn caption_eval(
    model: &ClaspModel,
    store: &ParamStore<f32>,
    records: &[DatasetRecord],
    beam: usize,
) -> Result<f64> {
    caption_accuracy(records, |r| describe(model, store, &r.trajectory, beam))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExplorationMethod {
    /// `z` sampled from the state-conditioned flow.
    BehaviourPrior,
    /// `z` sampled from the text encoder on a random caption.
    TextEncoding,
    /// Uniform random actions.
    Random,
}

impl ExplorationMethod {
    pub const ALL: [ExplorationMethod; 3] =
        [Self::BehaviourPrior, Self::TextEncoding, Self::Random];

    pub fn name(self) -> &'static str {
        match self {
            Self::BehaviourPrior => "behaviour_prior",
            Self::TextEncoding => "text_encoding",
            Self::Random => "random",
        }
    }
}

impl FromStr for ExplorationMethod {
    type Err = ClaspError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| ClaspError::Config(format!("unknown exploration method {s:?}")))
    }
}

/// Mean usefulness of `n_trials` rollouts of `T_MAX` steps, each from a fresh
/// board. `explore` gets the start board and the trial's random stream.
pub fn exploration_rate<F>(n_trials: usize, seed: u64, mut explore: F) -> Result<f64>
where
    F: FnMut(&BoardState, &mut ChaCha8Rng) -> Result<Trajectory>,
{
    if n_trials == 0 {
        return Err(ClaspError::InvalidInput("need at least one trial".into()));
    }
    let mut useful = 0usize;
    for i in 0..n_trials {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64 + 1);
        let board = sample_board(&mut rng);
        if is_useful(&explore(&board, &mut rng)?) {
            useful += 1;
        }
    }
    Ok(useful as f64 / n_trials as f64)
}

pub fn random_rollout<R: Rng>(board: &BoardState, rng: &mut R) -> Trajectory {
    rollout_with(board, T_MAX, |_| {
        Action::clipped(Vec2::new(
            rng.random_range(-A_MAX..=A_MAX),
            rng.random_range(-A_MAX..=A_MAX),
        ))
    })
}

pub fn exploration_eval(
    model: &ClaspModel,
    store: &ParamStore<f32>,
    blocks: &BlockSet,
    n_trials: usize,
    method: ExplorationMethod,
    seed: u64,
) -> Result<f64> {
    exploration_rate(n_trials, seed, |board, rng| match method {
        ExplorationMethod::Random => Ok(random_rollout(board, rng)),
        ExplorationMethod::BehaviourPrior => {
            let flow = model.flow.as_ref().ok_or_else(|| {
                ClaspError::Checkpoint("checkpoint has no behavior prior; run train-prior".into())
            })?;
            let z = flow.sample_prior(store, &board.to_vector(), rng)?;
            model.policy.rollout(store, &z, board, T_MAX)
        }
        ExplorationMethod::TextEncoding => {
            let slot = rng.random_range(0..N_BLOCKS);
            let dir = Direction::ALL[rng.random_range(0..Direction::ALL.len())];
            let caption = render_caption(&blocks.factors(slot, dir), rng.random());
            text_rollout(model, store, &caption, board, rng)
        }
    })
}

/// Rollout from `board` conditioned on a fresh sample of the caption's
/// text embedding.
pub fn text_rollout<R: Rng>(
    model: &ClaspModel,
    store: &ParamStore<f32>,
    caption: &[u32],
    board: &BoardState,
    rng: &mut R,
) -> Result<Trajectory> {
    let e = model.text.encode(store, caption)?;
    let eps: Vec<f32> = (0..model.d())
        .map(|_| rng.sample(rand_distr::StandardNormal))
        .collect();
    let z = draw(&e, eps, model.text.distributional)?;
    model.policy.rollout(store, &z, board, T_MAX)
}

/// `n` text-conditioned rollouts, each from a fresh board on its own stream.
pub fn text_rollouts(
    model: &ClaspModel,
    store: &ParamStore<f32>,
    caption: &[u32],
    n: usize,
    seed: u64,
) -> Result<Vec<Trajectory>> {
    (0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64 + 1);
            let board = sample_board(&mut rng);
            text_rollout(model, store, caption, &board, &mut rng)
        })
        .collect()
}

/// Which evaluations to run and how large.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    pub pool_size: usize,
    pub ks: Vec<usize>,
    pub trials: usize,
    pub beam: usize,
    /// Caps the number of records captioned; `None` captions all.
    pub caption_limit: Option<usize>,
    pub seed: u64,
    /// Embed with sampled noise instead of the mean.
    pub sample_embeddings: bool,
    pub retrieval: bool,
    pub caption: bool,
    pub exploration: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            pool_size: 15,
            ks: vec![1, 5],
            trials: 300,
            beam: 3,
            caption_limit: None,
            seed: 0,
            sample_embeddings: false,
            retrieval: true,
            caption: true,
            exploration: true,
        }
    }
}

/// Runs the selected evaluations on the test split of `data` (the whole
/// dataset if it has no test split). Returns `(metric, value)` pairs.
pub fn run_suite(
    trainer: &Trainer,
    data: &Dataset,
    opts: &EvalOptions,
) -> Result<Vec<(String, f64)>> {
    let records = if data.test().is_empty() {
        &data.records[..]
    } else {
        data.test()
    };
    let mut out = Vec::new();
    let sample = opts.sample_embeddings.then_some(opts.seed);
    if opts.retrieval {
        let pool = draw_pool(records, opts.pool_size, opts.seed)?;
        let r = retrieval_eval(&trainer.model, &trainer.store, &pool, &opts.ks, sample)?;
        for (k, v) in &r.text {
            out.push((format!("text_r@{k}"), *v));
        }
        for (k, v) in &r.behaviour {
            out.push((format!("behaviour_r@{k}"), *v));
        }
    }
    if opts.caption {
        let n = opts
            .caption_limit
            .unwrap_or(records.len())
            .min(records.len());
        let acc = caption_eval(&trainer.model, &trainer.store, &records[..n], opts.beam)?;
        out.push(("caption_accuracy".into(), acc));
    }
    if opts.exploration {
        for m in ExplorationMethod::ALL {
            if m == ExplorationMethod::BehaviourPrior && trainer.model.flow.is_none() {
                continue;
            }
            let v = exploration_eval(
                &trainer.model,
                &trainer.store,
                &data.blocks,
                opts.trials,
                m,
                opts.seed,
            )?;
            out.push((format!("useful_{}", m.name()), v));
        }
    }
    Ok(out)
}

/// Trains every named variant (with its flow), evaluates it and collects
/// one row per metric.
pub fn ablation_run(
    variants: &[(String, TrainConfig)],
    data: &Dataset,
    opts: &EvalOptions,
) -> Result<Vec<ResultRow>> {
    let mut rows = Vec::new();
    for (name, config) in variants {
        let ck = fit(
            config.clone(),
            data.vocab.clone(),
            data.train(),
            &FitOptions::default(),
        )?;
        let ck = if opts.exploration {
            fit_prior(&ck, data.train(), &FitOptions::default())?
        } else {
            ck
        };
        let trainer = Trainer::from_checkpoint(&ck)?;
        for (metric, value) in run_suite(&trainer, data, opts)? {
            rows.push(ResultRow {
                variant: name.clone(),
                metric,
                value,
                seed: config.seed,
            });
        }
    }
    Ok(rows)
}
