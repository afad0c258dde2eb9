//! The three training stages with atomic per-epoch checkpoints and resume.

use std::path::{Path, PathBuf};

use eegtok_core::optim::AdamW;
use eegtok_core::signal::PatchedSignal;
use eegtok_core::topology::Hierarchy;
use eegtok_core::training::{cpt_setup, sft_setup, BalancedSampler, FinetunePlan, Stage1Model, Stage2Model};
use eegtok_core::vq::{perplexity, CodebookHealth, UsageTracker};
use eegtok_core::{Gradients, Graph, ParamStore, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::{RunConfig, StageTrainConfig};
use crate::dataset::{Dataset, Split};
use crate::error::{CliError, CliResult};
use crate::models::{
    build, check_channels, patched, prepare_examples, read_meta, require_stage, restore, save_checkpoint,
    CheckpointMeta, Example, ExampleSpec, Models, Stage,
};
use crate::pipeline::{hierarchy_for, llm_client};
use crate::rundir::{resolve_checkpoint, MetricsRow, RunDir, FINAL, LATEST};

#[derive(Clone, Debug)]
pub struct TrainOptions {
    pub data: PathBuf,
    pub out: PathBuf,
    /// Previous-stage checkpoint (cpt and sft).
    pub init: Option<PathBuf>,
    pub resume: bool,
    /// Stop (with a checkpoint) once this many optimizer steps are done.
    pub max_steps: Option<u64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainSummary {
    pub stage: Stage,
    pub steps: u64,
    pub epochs: usize,
    pub complete: bool,
    pub epoch_losses: Vec<f64>,
    /// Token perplexity over the training corpus after the last epoch.
    pub perplexity: Option<f64>,
    pub codes_used: Option<usize>,
    pub checkpoint: PathBuf,
    pub plan: Option<FinetunePlan>,
}

struct StepLosses {
    total: f64,
    text: Option<f64>,
    eeg: Option<f64>,
    orth: Option<f64>,
}

trait StageSteps {
    /// Mean loss and gradients over the examples `idx`.
    fn batch(&mut self, store: &ParamStore, idx: &[usize]) -> CliResult<(Gradients, StepLosses)>;

    fn end_epoch(&mut self, _store: &mut ParamStore, _epoch: usize) -> CliResult<()> {
        Ok(())
    }

    fn state(&self) -> serde_json::Value {
        serde_json::Value::Null
    }
}

fn epoch_rng(seed: u64, stage: Stage, epoch: usize) -> ChaCha8Rng {
    let tag = match stage {
        Stage::Vq => 1u64,
        Stage::Cpt => 2,
        Stage::Sft => 3,
    };
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (tag << 48) ^ epoch as u64)
}

fn shuffled(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut v: Vec<usize> = (0..n).collect();
    v.shuffle(rng);
    v
}

/// Running sums of the current epoch, kept in the checkpoint so a resumed
/// epoch reports the same average.
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
struct EpochSums {
    loss: f64,
    count: usize,
}

struct Driver<'a> {
    run: &'a RunDir,
    tcfg: &'a StageTrainConfig,
    max_steps: Option<u64>,
    sums: EpochSums,
}

impl Driver<'_> {
    fn save(&self, store: &ParamStore, opt: &AdamW, meta: &mut CheckpointMeta, steps: &dyn StageSteps) -> CliResult<()> {
        meta.resume = json!({"sums": self.sums, "steps": steps.state()});
        save_checkpoint(&self.run.checkpoint(LATEST), store, Some(opt), meta)
    }

    /// Runs epochs until done or the step budget is spent. Returns whether
    /// training finished.
    fn drive(
        &mut self,
        store: &mut ParamStore,
        opt: &mut AdamW,
        meta: &mut CheckpointMeta,
        n: usize,
        order: &dyn Fn(usize) -> Vec<usize>,
        steps: &mut dyn StageSteps,
    ) -> CliResult<bool> {
        let bs = self.tcfg.batch_size;
        let schedule = self.tcfg.schedule(n.div_ceil(bs));
        while meta.epoch < self.tcfg.epochs {
            let ord = order(meta.epoch);
            let batches: Vec<&[usize]> = ord.chunks(bs).collect();
            for (b, idx) in batches.iter().enumerate().skip(meta.batch) {
                if self.max_steps.is_some_and(|m| meta.step >= m) {
                    self.save(store, opt, meta, steps)?;
                    return Ok(false);
                }
                let (mut grads, losses) = steps.batch(store, idx)?;
                if !losses.total.is_finite() || !grads.is_finite() {
                    return Err(CliError::Numeric(format!(
                        "non-finite loss or gradient at step {} (loss {})",
                        meta.step + 1,
                        losses.total
                    )));
                }
                if self.tcfg.grad_clip > 0.0 {
                    grads.clip_global_norm(self.tcfg.grad_clip);
                }
                let lr = self.tcfg.lr * schedule.factor(meta.step);
                opt.step(store, &grads, lr);
                meta.step += 1;
                meta.batch = b + 1;
                self.sums.loss += losses.total * idx.len() as f64;
                self.sums.count += idx.len();
                self.run.append_metrics(&MetricsRow {
                    step: meta.step,
                    loss_total: losses.total,
                    loss_text: losses.text,
                    loss_eeg: losses.eeg,
                    loss_orth: losses.orth,
                    lr,
                })?;
            }
            meta.history.push(self.sums.loss / self.sums.count.max(1) as f64);
            self.sums = EpochSums::default();
            steps.end_epoch(store, meta.epoch)?;
            meta.epoch += 1;
            meta.batch = 0;
            self.save(store, opt, meta, steps)?;
        }
        Ok(true)
    }
}

struct Session {
    run: RunDir,
    meta: CheckpointMeta,
    opt: AdamW,
    sums: EpochSums,
}

/// Opens the run directory. On resume returns the latest checkpoint path
/// and restores bookkeeping; otherwise starts fresh.
fn open_session(
    cfg: &RunConfig,
    opts: &TrainOptions,
    stage: Stage,
    tcfg: &StageTrainConfig,
) -> CliResult<(Session, Option<PathBuf>)> {
    let latest = opts.out.join("checkpoints").join(LATEST);
    if opts.resume {
        let meta = read_meta(&latest).map_err(|e| CliError::Dependency(format!("nothing to resume: {e}")))?;
        if meta.stage != stage {
            return Err(CliError::Dependency(format!(
                "{} holds a `{}` run, not `{}`",
                opts.out.display(),
                meta.stage.name(),
                stage.name()
            )));
        }
        let run = RunDir::create(&opts.out, &meta.config)?;
        run.reset_metrics(Some(meta.step))?;
        let sums = serde_json::from_value(meta.resume["sums"].clone()).unwrap_or_default();
        let opt = AdamW::new(meta.config_for(stage).adamw());
        return Ok((Session { run, meta, opt, sums }, Some(latest)));
    }
    let run = RunDir::create(&opts.out, cfg)?;
    run.reset_metrics(None)?;
    let meta = CheckpointMeta {
        stage,
        config: cfg.clone(),
        channels: Vec::new(),
        classes: Vec::new(),
        dataset_name: String::new(),
        epoch: 0,
        batch: 0,
        step: 0,
        complete: false,
        history: Vec::new(),
        plan: None,
        resume: serde_json::Value::Null,
    };
    Ok((
        Session {
            run,
            meta,
            opt: AdamW::new(tcfg.adamw()),
            sums: EpochSums::default(),
        },
        None,
    ))
}

impl CheckpointMeta {
    fn config_for(&self, stage: Stage) -> &StageTrainConfig {
        match stage {
            Stage::Vq => &self.config.train_vq,
            Stage::Cpt => &self.config.train_cpt,
            Stage::Sft => &self.config.train_sft,
        }
    }
}

fn finish(
    s: &mut Session,
    store: &ParamStore,
    complete: bool,
    extra: (Option<f64>, Option<usize>),
) -> CliResult<TrainSummary> {
    let mut path = s.run.checkpoint(LATEST);
    if complete {
        s.meta.complete = true;
        path = s.run.checkpoint(FINAL);
        save_checkpoint(&path, store, None, &s.meta)?;
        save_checkpoint(&s.run.checkpoint(LATEST), store, Some(&s.opt), &s.meta)?;
    }
    let summary = TrainSummary {
        stage: s.meta.stage,
        steps: s.meta.step,
        epochs: s.meta.epoch,
        complete,
        epoch_losses: s.meta.history.clone(),
        perplexity: extra.0,
        codes_used: extra.1,
        checkpoint: path,
        plan: s.meta.plan.clone(),
    };
    s.run
        .write_json("summary.json", &serde_json::to_value(&summary).expect("summary serializes"))?;
    Ok(summary)
}

fn train_items(ds: &Dataset) -> Vec<&crate::dataset::DatasetItem> {
    ds.items(Some(Split::Train))
}

struct VqSteps<'a> {
    model: &'a Stage1Model,
    hier: &'a Hierarchy,
    data: &'a [PatchedSignal],
    tracker: UsageTracker,
    recent: Vec<Tensor>,
    seed: u64,
    health: Vec<CodebookHealth>,
}

impl StageSteps for VqSteps<'_> {
    fn batch(&mut self, store: &ParamStore, idx: &[usize]) -> CliResult<(Gradients, StepLosses)> {
        let mut grads = Gradients::default();
        let mut total = 0.0;
        for &i in idx {
            let mut g = Graph::new();
            let out = self.model.forward(&mut g, store, self.hier, &self.data[i])?;
            g.backward(out.loss)?;
            grads.accumulate(&g.param_grads());
            total += g.value(out.loss).item()?;
            self.tracker.record(&out.quant.tokens);
            self.recent.push(g.value(out.quant.h).clone());
            if self.recent.len() > 8 {
                self.recent.remove(0);
            }
        }
        grads.scale(1.0 / idx.len() as f64);
        Ok((
            grads,
            StepLosses {
                total: total / idx.len() as f64,
                text: None,
                eeg: None,
                orth: None,
            },
        ))
    }

    fn end_epoch(&mut self, store: &mut ParamStore, epoch: usize) -> CliResult<()> {
        let rows = stack_rows(&self.recent)?;
        let mut rng = epoch_rng(self.seed ^ 0x5eed, Stage::Vq, epoch);
        let h = self.tracker.end_epoch(store, self.model.quantizer.codebook, rows.as_ref(), &mut rng)?;
        self.health.push(h);
        Ok(())
    }

    fn state(&self) -> serde_json::Value {
        json!({"tracker": self.tracker, "health": self.health})
    }
}

fn stack_rows(parts: &[Tensor]) -> CliResult<Option<Tensor>> {
    let Some(first) = parts.first() else { return Ok(None) };
    let d = first.shape()[1];
    let data: Vec<f64> = parts.iter().flat_map(|t| t.data().iter().copied()).collect();
    Ok(Some(Tensor::new(vec![data.len() / d, d], data)?))
}

/// Loads the training recordings of `ds` as patched signals sharing one
/// channel layout.
fn load_patched(ds: &Dataset, cfg: &RunConfig) -> CliResult<(Vec<String>, Vec<PatchedSignal>)> {
    let items = train_items(ds);
    if items.is_empty() {
        return Err(CliError::Data(format!("dataset `{}` has no training items", ds.index.name)));
    }
    let mut channels: Option<Vec<String>> = None;
    let mut out = Vec::with_capacity(items.len());
    for it in items {
        let rec = ds.load(it)?;
        match &channels {
            Some(c) => check_channels(c, &rec, &it.id)?,
            None => channels = Some(rec.channels().to_vec()),
        }
        out.push(patched(&rec, cfg)?);
    }
    Ok((channels.expect("at least one item"), out))
}

/// Stage 1: tokenizer training on reconstruction.
pub fn train_vq(cfg: &RunConfig, opts: &TrainOptions) -> CliResult<TrainSummary> {
    cfg.validate()?;
    let ds = Dataset::open(&opts.data)?;
    let (mut s, resume_from) = open_session(cfg, opts, Stage::Vq, &cfg.train_vq)?;
    let cfg = s.meta.config.clone();
    let (channels, data) = load_patched(&ds, &cfg)?;
    let hier = hierarchy_for(&channels)?;
    let Models { mut store, stage1, .. } = build(&cfg, false, cfg.seed)?;
    match &resume_from {
        Some(dir) => {
            check_meta_channels(&s.meta.channels, &channels)?;
            restore(dir, &mut store, Some((&mut s.opt, s.meta.step)))?;
        }
        None => {
            s.meta.channels = channels.clone();
            s.meta.dataset_name = ds.index.name.clone();
            let mut rows = Vec::new();
            for ps in data.iter().take(32) {
                let mut g = Graph::new();
                let out = stage1.encoder.forward(&mut g, &store, &hier, ps)?;
                let h = stage1.quantizer.project(&mut g, &store, out.h)?;
                rows.push(g.value(h).clone());
            }
            let rows = stack_rows(&rows)?.expect("non-empty corpus");
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6b6d);
            stage1.quantizer.kmeans_init(&mut store, &rows, 20, &mut rng)?;
        }
    }
    let saved = &s.meta.resume["steps"];
    let mut steps = VqSteps {
        model: &stage1,
        hier: &hier,
        data: &data,
        tracker: serde_json::from_value(saved["tracker"].clone())
            .unwrap_or_else(|_| UsageTracker::new(cfg.stage1.vq.codes, cfg.stage1.vq.dead_after_epochs)),
        recent: Vec::new(),
        seed: cfg.seed,
        health: serde_json::from_value(saved["health"].clone()).unwrap_or_default(),
    };
    let seed = cfg.seed;
    let order = |e: usize| shuffled(data.len(), &mut epoch_rng(seed, Stage::Vq, e));
    let mut driver = Driver {
        run: &s.run,
        tcfg: &cfg.train_vq,
        max_steps: opts.max_steps,
        sums: s.sums,
    };
    let complete = driver.drive(&mut store, &mut s.opt, &mut s.meta, data.len(), &order, &mut steps)?;
    let health = steps.health;
    let mut counts = vec![0usize; cfg.stage1.vq.codes];
    for ps in &data {
        for t in stage1.tokenize(&store, &hier, ps)? {
            counts[t] += 1;
        }
    }
    let ppl = perplexity(&counts);
    let used = counts.iter().filter(|&&c| c > 0).count();
    s.run.write_json("artifacts/codebook_health.json", &serde_json::to_value(&health).expect("health serializes"))?;
    finish(&mut s, &store, complete, (Some(ppl), Some(used)))
}

fn check_meta_channels(saved: &[String], now: &[String]) -> CliResult<()> {
    if saved != now {
        return Err(CliError::Data(format!(
            "dataset channels {now:?} differ from the run's {saved:?}"
        )));
    }
    Ok(())
}

struct CptSteps<'a> {
    model: &'a Stage2Model,
    examples: &'a [Example],
}

impl StageSteps for CptSteps<'_> {
    fn batch(&mut self, store: &ParamStore, idx: &[usize]) -> CliResult<(Gradients, StepLosses)> {
        let mut grads = Gradients::default();
        let (mut total, mut text, mut eeg, mut orth) = (0.0, 0.0, 0.0, 0.0);
        for &i in idx {
            let mut g = Graph::new();
            let (l, _) = self.model.cpt_losses(&mut g, store, &self.examples[i].input)?;
            g.backward(l.total)?;
            grads.accumulate(&g.param_grads());
            total += g.value(l.total).item()?;
            text += g.value(l.ntp.text).item()?;
            eeg += g.value(l.ntp.eeg).item()?;
            orth += g.value(l.orth).item()?;
        }
        let k = idx.len() as f64;
        grads.scale(1.0 / k);
        Ok((
            grads,
            StepLosses {
                total: total / k,
                text: Some(text / k),
                eeg: Some(eeg / k),
                orth: Some(orth / k),
            },
        ))
    }
}

struct SftSteps<'a> {
    model: &'a Stage2Model,
    examples: &'a [Example],
}

impl StageSteps for SftSteps<'_> {
    fn batch(&mut self, store: &ParamStore, idx: &[usize]) -> CliResult<(Gradients, StepLosses)> {
        let mut grads = Gradients::default();
        let mut total = 0.0;
        for &i in idx {
            let mut g = Graph::new();
            let (l, _) = self.model.sft_loss(&mut g, store, &self.examples[i].input)?;
            g.backward(l)?;
            grads.accumulate(&g.param_grads());
            total += g.value(l).item()?;
        }
        let k = idx.len() as f64;
        grads.scale(1.0 / k);
        Ok((
            grads,
            StepLosses {
                total: total / k,
                text: None,
                eeg: None,
                orth: None,
            },
        ))
    }
}

/// Previous-stage checkpoint, checked before any compute.
fn dependency(opts: &TrainOptions, want: Stage) -> CliResult<(PathBuf, CheckpointMeta)> {
    let init = opts.init.as_ref().ok_or_else(|| {
        CliError::Dependency(format!("`--init` must point at a finished `{}` run", want.name()))
    })?;
    let dir = resolve_checkpoint(init)?;
    let meta = read_meta(&dir)?;
    require_stage(&dir, &meta, &[want])?;
    Ok((dir, meta))
}

/// Architecture sections come from the previous stage so its parameters fit.
fn inherit(cfg: &RunConfig, prev: &CheckpointMeta, with_stage2: bool) -> RunConfig {
    let mut c = cfg.clone();
    c.stage1 = prev.config.stage1.clone();
    c.preprocess = prev.config.preprocess.clone();
    if with_stage2 {
        c.stage2 = prev.config.stage2.clone();
        c.text = prev.config.text.clone();
        c.profile = prev.config.profile.clone();
    }
    c
}

/// Stage 2: continued pretraining of adapters, vocabulary rows and the
/// refiner on hybrid sequences.
pub fn train_cpt(cfg: &RunConfig, opts: &TrainOptions) -> CliResult<TrainSummary> {
    let prev = if opts.resume { None } else { Some(dependency(opts, Stage::Vq)?) };
    let cfg = match &prev {
        Some((_, m)) => inherit(cfg, m, false),
        None => cfg.clone(),
    };
    cfg.validate()?;
    let ds = Dataset::open(&opts.data)?;
    let (mut s, resume_from) = open_session(&cfg, opts, Stage::Cpt, &cfg.train_cpt)?;
    let cfg = s.meta.config.clone();
    let mut m = build(&cfg, true, cfg.seed)?;
    match (&resume_from, &prev) {
        (Some(dir), _) => {
            m.attach_adapter_slots(&cfg)?;
            restore(dir, &mut m.store, Some((&mut s.opt, s.meta.step)))?;
            s.meta.plan.as_ref().expect("cpt checkpoints carry a plan").apply(&mut m.store)?;
        }
        (None, Some((dir, pm))) => {
            restore(dir, &mut m.store, None)?;
            s.meta.channels = pm.channels.clone();
            s.meta.dataset_name = ds.index.name.clone();
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xc9_7000);
            let store = &mut m.store;
            let lm = &mut m.stage2.as_mut().expect("stage-2 built").backbone;
            s.meta.plan = Some(cpt_setup(store, lm, &cfg.lora, &mut rng)?);
        }
        (None, None) => unreachable!("fresh runs resolve their dependency first"),
    }
    let items: Vec<_> = train_items(&ds).into_iter().map(|i| (i, None)).collect();
    let mut client = llm_client(&cfg.llm);
    let cache = s.run.artifacts().join("profiles");
    let spec = ExampleSpec {
        cfg: &cfg,
        channels: &s.meta.channels,
        classes: &ds.index.classes,
        dataset_name: &ds.index.name,
        with_answer: false,
        cache: Some(&cache),
    };
    let examples = prepare_examples(&m, &ds, &items, &spec, client.as_mut())?;
    let model = m.stage2.as_ref().expect("stage-2 built");
    let mut steps = CptSteps {
        model,
        examples: &examples,
    };
    let seed = cfg.seed;
    let order = |e: usize| shuffled(examples.len(), &mut epoch_rng(seed, Stage::Cpt, e));
    let mut driver = Driver {
        run: &s.run,
        tcfg: &cfg.train_cpt,
        max_steps: opts.max_steps,
        sums: s.sums,
    };
    let complete = driver.drive(&mut m.store, &mut s.opt, &mut s.meta, examples.len(), &order, &mut steps)?;
    finish(&mut s, &m.store, complete, (None, None))
}

/// Stage 3: answer-only instruction tuning with a fresh adapter.
pub fn train_sft(cfg: &RunConfig, opts: &TrainOptions) -> CliResult<TrainSummary> {
    let prev = if opts.resume { None } else { Some(dependency(opts, Stage::Cpt)?) };
    let cfg = match &prev {
        Some((_, pm)) => {
            let mut c = inherit(cfg, pm, true);
            // the merged adapter's slots are reused, so the rank must match
            c.lora.rank = pm.config.lora.rank;
            c
        }
        None => cfg.clone(),
    };
    cfg.validate()?;
    let ds = Dataset::open(&opts.data)?;
    let labelled = ds.labeled(Split::Train)?;
    let (mut s, resume_from) = open_session(&cfg, opts, Stage::Sft, &cfg.train_sft)?;
    let cfg = s.meta.config.clone();
    let mut m = build(&cfg, true, cfg.seed)?;
    match (&resume_from, &prev) {
        (Some(dir), _) => {
            if s.meta.classes != ds.index.classes {
                return Err(CliError::Data(format!(
                    "dataset classes {:?} differ from the run's {:?}",
                    ds.index.classes, s.meta.classes
                )));
            }
            m.attach_adapter_slots(&cfg)?;
            restore(dir, &mut m.store, Some((&mut s.opt, s.meta.step)))?;
            s.meta.plan.as_ref().expect("sft checkpoints carry a plan").apply(&mut m.store)?;
        }
        (None, Some((dir, pm))) => {
            let mut prev_cfg = cfg.clone();
            prev_cfg.lora = pm.config.lora.clone();
            m.attach_adapter_slots(&prev_cfg)?;
            restore(dir, &mut m.store, None)?;
            s.meta.channels = pm.channels.clone();
            s.meta.classes = ds.index.classes.clone();
            s.meta.dataset_name = ds.index.name.clone();
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5f7);
            let store = &mut m.store;
            let lm = &mut m.stage2.as_mut().expect("stage-2 built").backbone;
            s.meta.plan = Some(sft_setup(store, lm, &cfg.lora, &mut rng)?);
        }
        (None, None) => unreachable!("fresh runs resolve their dependency first"),
    }
    let items: Vec<_> = labelled.iter().map(|&(i, l)| (i, Some(l))).collect();
    let labels: Vec<usize> = labelled.iter().map(|&(_, l)| l).collect();
    let mut client = llm_client(&cfg.llm);
    let cache = s.run.artifacts().join("profiles");
    let spec = ExampleSpec {
        cfg: &cfg,
        channels: &s.meta.channels,
        classes: &s.meta.classes,
        dataset_name: &ds.index.name,
        with_answer: true,
        cache: Some(&cache),
    };
    let examples = prepare_examples(&m, &ds, &items, &spec, client.as_mut())?;
    let model = m.stage2.as_ref().expect("stage-2 built");
    let mut steps = SftSteps {
        model,
        examples: &examples,
    };
    let sampler = if cfg.class_balance { Some(BalancedSampler::new(&labels)?) } else { None };
    let (seed, n) = (cfg.seed, examples.len());
    let order = |e: usize| {
        let mut rng = epoch_rng(seed, Stage::Sft, e);
        match &sampler {
            Some(smp) => smp.epoch(n, &mut rng),
            None => shuffled(n, &mut rng),
        }
    };
    let mut driver = Driver {
        run: &s.run,
        tcfg: &cfg.train_sft,
        max_steps: opts.max_steps,
        sums: s.sums,
    };
    let complete = driver.drive(&mut m.store, &mut s.opt, &mut s.meta, n, &order, &mut steps)?;
    finish(&mut s, &m.store, complete, (None, None))
}

/// Reads `summary.json` from a run directory.
pub fn read_summary(run: &Path) -> CliResult<TrainSummary> {
    let text = std::fs::read_to_string(run.join("summary.json"))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn summary_json(s: &TrainSummary) -> serde_json::Value {
    json!(s)
}
