use std::cmp::Ordering;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::optim::{cosine_lr, AdamConfig, AdamState};
use super::reinforce::{reinforce_step, Baseline};
use super::{joint_reward, RewardConfig, TrainError};
use crate::controller::{sample_arch, ArchSample, ControllerConfig, ControllerParams};
use crate::evaluators::{EvalError, Evaluator, Measurement};
use crate::searchspace::{arch_to_tokens, ArchFile, ArchSpec, SpaceConfig};
use crate::tensors::{read_checkpoint, write_checkpoint, CheckpointError};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Controller updates per epoch.
    pub theta_steps_per_epoch: usize,
    /// Architectures sampled per controller update.
    pub samples_per_step: usize,
    pub controller_lr: (f64, f64),
    /// Architectures handed to the evaluator's shared-weight training per epoch.
    pub shared_archs_per_epoch: usize,
    /// Shared-weight optimizer steps requested per epoch.
    pub shared_steps_per_epoch: usize,
    pub shared_lr: (f64, f64),
    pub baseline: bool,
    pub baseline_decay: f64,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Attempts per evaluator call before the search aborts.
    pub attempts: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 400,
            theta_steps_per_epoch: 5,
            samples_per_step: 1,
            controller_lr: (3e-4, 1.5e-4),
            shared_archs_per_epoch: 8,
            shared_steps_per_epoch: 100,
            shared_lr: (1e-3, 1e-5),
            baseline: true,
            baseline_decay: 0.95,
            adam: AdamConfig::default(),
            seed: 1,
            attempts: 3,
        }
    }
}

impl TrainConfig {
    pub fn check(&self) -> Result<(), TrainError> {
        let fail = |m: String| Err(TrainError::Config(m));
        if self.epochs == 0 || self.theta_steps_per_epoch == 0 || self.samples_per_step == 0 {
            return fail("epochs, theta_steps_per_epoch and samples_per_step must be at least 1".into());
        }
        for (name, (hi, lo)) in [("controller_lr", self.controller_lr), ("shared_lr", self.shared_lr)] {
            if !(lo <= hi && lo >= 0.0 && hi.is_finite()) {
                return fail(format!("{name} ({hi}, {lo}) must satisfy 0 <= min <= max"));
            }
        }
        if !(0.0..=1.0).contains(&self.baseline_decay) {
            return fail(format!("baseline_decay {} is outside [0, 1]", self.baseline_decay));
        }
        if self.attempts == 0 {
            return fail("attempts must be at least 1".into());
        }
        Ok(())
    }

    pub fn samples_per_epoch(&self) -> usize {
        self.theta_steps_per_epoch * self.samples_per_step
    }
}

/// One evaluated controller sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    /// Controller update this sample contributed to.
    pub step: usize,
    pub epoch: usize,
    pub arch: ArchFile,
    pub psnr: f64,
    pub cost_gmacs: f64,
    pub reward: f64,
    pub entropy: f64,
    /// Baseline subtracted from this sample's reward.
    pub baseline: f64,
    pub lr: f64,
}

/// Append-only record of a search.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SearchLog {
    pub records: Vec<LogRecord>,
}

impl SearchLog {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.reward).collect()
    }

    /// Highest-reward record; earlier records win ties.
    pub fn best(&self) -> Option<&LogRecord> {
        self.records.iter().fold(None, |best: Option<&LogRecord>, r| match best {
            Some(b) if b.reward >= r.reward => Some(b),
            _ => Some(r),
        })
    }

    /// Mean reward of the first and last `fraction` of records.
    pub fn head_tail_means(&self, fraction: f64) -> Option<(f64, f64)> {
        let n = ((self.len() as f64 * fraction).round() as usize).max(1);
        if self.len() < n {
            return None;
        }
        let mean = |rs: &[LogRecord]| rs.iter().map(|r| r.reward).sum::<f64>() / rs.len() as f64;
        Some((mean(&self.records[..n]), mean(&self.records[self.len() - n..])))
    }

    /// Writes `step,reward,psnr,cost_gmacs,entropy,baseline,lr` rows.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), csv::Error> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["step", "reward", "psnr", "cost_gmacs", "entropy", "baseline", "lr"])?;
        for r in &self.records {
            out.write_record([
                r.step.to_string(),
                r.reward.to_string(),
                r.psnr.to_string(),
                r.cost_gmacs.to_string(),
                r.entropy.to_string(),
                r.baseline.to_string(),
                r.lr.to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory succeeds");
        String::from_utf8(buf).expect("csv is utf-8")
    }
}

/// Everything needed to continue a search exactly where it stopped.
#[derive(Clone, Debug)]
pub struct SearchState {
    pub params: ControllerParams,
    pub adam: AdamState,
    pub baseline: Baseline,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed controller updates.
    pub step: usize,
    pub rng: ChaCha8Rng,
    pub log: SearchLog,
}

impl SearchState {
    /// Fresh state with parameters drawn from the seeded generator.
    pub fn new(space: SpaceConfig, controller: ControllerConfig, tc: &TrainConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
        let params = ControllerParams::random(space, controller, &mut rng);
        Self::with_params(params, rng, tc)
    }

    pub fn with_params(params: ControllerParams, rng: ChaCha8Rng, tc: &TrainConfig) -> Self {
        let adam = AdamState::new(params.len());
        SearchState {
            params,
            adam,
            baseline: Baseline::new(tc.baseline, tc.baseline_decay),
            epoch: 0,
            step: 0,
            rng,
            log: SearchLog::default(),
        }
    }

    pub fn finished(&self, tc: &TrainConfig) -> bool {
        self.epoch >= tc.epochs
    }
}

fn with_retries<T>(attempts: usize, mut f: impl FnMut() -> Result<T, EvalError>) -> Result<T, TrainError> {
    let mut last = None;
    for _ in 0..attempts.max(1) {
        match f() {
            Ok(v) => return Ok(v),
            Err(e) => last = Some(e),
        }
    }
    Err(TrainError::Evaluator { attempts: attempts.max(1), source: last.expect("at least one attempt") })
}

/// Runs one epoch: a shared-weight training request, then the controller updates.
///
/// On an evaluator failure the state keeps every record of completed
/// controller updates and no partial update is applied.
pub fn run_epoch(
    state: &mut SearchState,
    evaluator: &mut dyn Evaluator,
    rc: &RewardConfig,
    tc: &TrainConfig,
) -> Result<(), TrainError> {
    let epoch = state.epoch;
    let shared_lr = cosine_lr(epoch, tc.epochs, tc.shared_lr.0, tc.shared_lr.1)?;
    let lr = cosine_lr(epoch, tc.epochs, tc.controller_lr.0, tc.controller_lr.1)?;

    let shared: Vec<ArchSpec> =
        (0..tc.shared_archs_per_epoch).map(|_| sample_arch(&state.params, &mut state.rng).arch).collect();
    if !shared.is_empty() {
        with_retries(tc.attempts, || evaluator.train_hook(&shared, tc.shared_steps_per_epoch, shared_lr))?;
    }

    for _ in 0..tc.theta_steps_per_epoch {
        let samples: Vec<ArchSample> =
            (0..tc.samples_per_step).map(|_| sample_arch(&state.params, &mut state.rng)).collect();
        let archs: Vec<ArchSpec> = samples.iter().map(|s| s.arch.clone()).collect();
        let measured = with_retries(tc.attempts, || evaluator.evaluate_batch(&archs))?;
        let rewards: Vec<f64> = measured.iter().map(|m| joint_reward(m, rc)).collect();
        let batch: Vec<(ArchSample, f64)> = samples.into_iter().zip(rewards.iter().copied()).collect();
        let stats = reinforce_step(
            &mut state.params,
            &batch,
            &mut state.baseline,
            &mut state.adam,
            &tc.adam,
            rc.entropy_weight,
            lr,
        )?;
        for ((sample, reward), m) in batch.iter().zip(&measured) {
            state.log.records.push(LogRecord {
                step: state.step,
                epoch,
                arch: ArchFile::from_arch(&sample.arch),
                psnr: m.psnr,
                cost_gmacs: m.cost_gmacs(),
                reward: *reward,
                entropy: sample.entropy,
                baseline: stats.baseline,
                lr,
            });
        }
        state.step += 1;
    }
    state.epoch += 1;
    Ok(())
}

/// Runs epochs until `tc.epochs` are complete.
pub fn run_search(
    state: &mut SearchState,
    evaluator: &mut dyn Evaluator,
    rc: &RewardConfig,
    tc: &TrainConfig,
) -> Result<(), TrainError> {
    rc.check()?;
    tc.check()?;
    while !state.finished(tc) {
        run_epoch(state, evaluator, rc, tc)?;
    }
    Ok(())
}

const STATE_KIND: &str = "search_state";

/// Writes parameters, optimizer moments, generator position and log.
pub fn save_search_state<W: Write>(
    w: W,
    state: &SearchState,
    rc: &RewardConfig,
    tc: &TrainConfig,
) -> Result<(), CheckpointError> {
    let mut store = state.params.store().clone();
    let mut moments = state.params.store().zeros_like();
    moments.data_mut().copy_from_slice(&state.adam.m);
    store.extend_prefixed("adam.m.", &moments);
    moments.data_mut().copy_from_slice(&state.adam.v);
    store.extend_prefixed("adam.v.", &moments);
    let meta = json!({
        "kind": STATE_KIND,
        "space": state.params.space(),
        "controller": state.params.config(),
        "reward": rc,
        "train": tc,
        "epoch": state.epoch,
        "step": state.step,
        "adam_t": state.adam.t,
        "baseline": state.baseline,
        "rng_seed": state.rng.get_seed(),
        "rng_word_pos": state.rng.get_word_pos().to_string(),
        "log": state.log,
    });
    write_checkpoint(w, &store, &meta)
}

fn meta_field<T: serde::de::DeserializeOwned>(meta: &serde_json::Value, key: &str) -> Result<T, CheckpointError> {
    let v = meta.get(key).ok_or_else(|| CheckpointError::Corrupt(format!("metadata lacks {key:?}")))?;
    serde_json::from_value(v.clone()).map_err(|e| CheckpointError::Corrupt(format!("metadata {key:?}: {e}")))
}

/// Restores a state written by [`save_search_state`], with the configurations it was saved under.
pub fn load_search_state<R: io::Read>(r: R) -> Result<(SearchState, RewardConfig, TrainConfig), CheckpointError> {
    let (store, meta) = read_checkpoint(r)?;
    if meta.get("kind").and_then(|k| k.as_str()) != Some(STATE_KIND) {
        return Err(CheckpointError::Corrupt("not a search checkpoint".into()));
    }
    let space: SpaceConfig = meta_field(&meta, "space")?;
    let controller: ControllerConfig = meta_field(&meta, "controller")?;
    let template = ControllerParams::zeros(space, controller);
    let params_store = store.extract_prefixed("", template.store())?;
    let params = ControllerParams::from_store(space, controller, params_store)
        .map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
    let m = store.extract_prefixed("adam.m.", template.store())?.data().to_vec();
    let v = store.extract_prefixed("adam.v.", template.store())?.data().to_vec();
    let seed: [u8; 32] = meta_field(&meta, "rng_seed")?;
    let word_pos: String = meta_field(&meta, "rng_word_pos")?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_word_pos(word_pos.parse().map_err(|e| CheckpointError::Corrupt(format!("rng position: {e}")))?);
    let state = SearchState {
        params,
        adam: AdamState { m, v, t: meta_field(&meta, "adam_t")? },
        baseline: meta_field(&meta, "baseline")?,
        epoch: meta_field(&meta, "epoch")?,
        step: meta_field(&meta, "step")?,
        rng,
        log: meta_field(&meta, "log")?,
    };
    Ok((state, meta_field(&meta, "reward")?, meta_field(&meta, "train")?))
}

impl SearchState {
    pub fn save(&self, path: &Path, rc: &RewardConfig, tc: &TrainConfig) -> Result<(), CheckpointError> {
        let tmp = path.with_extension("tmp");
        {
            let mut w = BufWriter::new(File::create(&tmp)?);
            save_search_state(&mut w, self, rc, tc)?;
            w.flush()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(SearchState, RewardConfig, TrainConfig), CheckpointError> {
        load_search_state(BufReader::new(File::open(path)?))
    }
}

/// A sampled and evaluated derivation candidate.
#[derive(Clone, Debug, PartialEq)]
pub struct Candidate {
    pub arch: ArchSpec,
    pub tokens: Vec<usize>,
    pub measurement: Measurement,
    pub reward: f64,
    pub log_prob: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Derivation {
    /// Candidates best first.
    pub candidates: Vec<Candidate>,
}

impl Derivation {
    pub fn best(&self) -> &Candidate {
        &self.candidates[0]
    }
}

fn rank(a: &Candidate, b: &Candidate) -> Ordering {
    b.reward
        .total_cmp(&a.reward)
        .then(a.measurement.cost.total_cmp(&b.measurement.cost))
        .then_with(|| a.tokens.cmp(&b.tokens))
}

/// Samples `k` architectures, evaluates them, and ranks by joint reward
/// (higher first), then cost (lower first), then token sequence.
pub fn derive<R: Rng + ?Sized>(
    params: &ControllerParams,
    evaluator: &mut dyn Evaluator,
    rc: &RewardConfig,
    k: usize,
    attempts: usize,
    rng: &mut R,
) -> Result<Derivation, TrainError> {
    if k == 0 {
        return Err(TrainError::Config("derive needs k >= 1".into()));
    }
    let samples: Vec<ArchSample> = (0..k).map(|_| sample_arch(params, rng).without_trace()).collect();
    let archs: Vec<ArchSpec> = samples.iter().map(|s| s.arch.clone()).collect();
    let measured = with_retries(attempts, || evaluator.evaluate_batch(&archs))?;
    let mut candidates: Vec<Candidate> = samples
        .into_iter()
        .zip(measured)
        .map(|(s, m)| {
            let tokens = arch_to_tokens(&s.arch, params.space()).expect("sampled architectures are valid");
            Candidate { reward: joint_reward(&m, rc), arch: s.arch, tokens, measurement: m, log_prob: s.log_prob }
        })
        .collect();
    candidates.sort_by(rank);
    Ok(Derivation { candidates })
}
