use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::checkpoint::{Checkpoint, RngState};
use super::eval::{degraded_quality, evaluate_net, Quality};
use super::optim::{cosine_lr, Adam};
use super::{Dataset, RunConfig};
use crate::attention::{project, Projector};
use crate::data::{BatchIter, Task};
use crate::error::{config_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::losses::{
    contrastive_image_loss, gk_feature_loss, reconstruction_loss, total_loss, PhiExtractor,
};
use crate::models::{compress_config, ModelConfig, ParamStore, RestorationNet};
use crate::tensor::Tensor;

const NET_PREFIX: &str = "net.";
const PROJECTOR_SEED_SALT: u64 = 0x7072_6f6a;
/// The contrastive feature extractor is the same for every run.
pub const PHI_SEED: u64 = 0x0070_6869;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Teacher,
    Student,
}

/// JSON block stored in every training checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub kind: ModelKind,
    pub task: Task,
    pub model: ModelConfig,
    pub run: RunConfig,
    pub total_steps: usize,
    pub adam_step: u64,
    /// Batches drawn in the epoch the stored RNG state belongs to.
    pub epoch_batches: usize,
    pub teacher_sha256: Option<String>,
}

impl CheckpointMeta {
    pub fn parse(ckpt: &Checkpoint) -> Result<Self> {
        serde_json::from_str(&ckpt.meta)
            .map_err(|e| Error::Format(format!("checkpoint metadata: {e}")))
    }
}

/// Rebuilds the restoration net stored in a training checkpoint.
pub fn load_net(ckpt: &Checkpoint) -> Result<RestorationNet> {
    let meta = CheckpointMeta::parse(ckpt)?;
    RestorationNet::from_params(&meta.model, ckpt.params(NET_PREFIX)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub rec: f64,
    pub gk: f64,
    pub cl: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: usize,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepLog>,
    pub evals: Vec<EvalPoint>,
    /// Held-out quality of the unrestored inputs.
    pub degraded: Option<Quality>,
}

/// Per-invocation controls that are not part of the run configuration.
#[derive(Clone, Copy, Debug, Default)]
pub struct TrainOptions<'a> {
    /// Continue from a checkpoint written by the same run.
    pub resume: Option<&'a Checkpoint>,
    /// Stop once this many steps have been taken, without changing the schedule.
    pub stop_at: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: TrainLog,
}

struct Terms {
    total: Var,
    rec: Var,
    gk: Option<Var>,
    cl: Option<Var>,
}

/// Trainable tensors (net first, then projectors) plus optimizer and data position.
struct State {
    kind: ModelKind,
    model: ModelConfig,
    params: ParamStore,
    net_len: usize,
    adam: Adam,
    batches: BatchIter,
    step: usize,
    total: usize,
    teacher_sha256: Option<String>,
    n_train: usize,
}

impl State {
    fn fresh(
        kind: ModelKind,
        model: &ModelConfig,
        extra: ParamStore,
        run: &RunConfig,
        n_train: usize,
    ) -> Result<Self> {
        let net = RestorationNet::new(model, run.train.seed)?;
        let mut params = ParamStore::new();
        for (name, t) in net.params().iter() {
            params.push(format!("{NET_PREFIX}{name}"), t.clone());
        }
        let net_len = params.len();
        for (name, t) in extra.iter() {
            params.push(name, t.clone());
        }
        let batches = crate::data::batch_iter(n_train, run.train.batch_size, run.train.seed)?;
        let total = run.train.total_steps(batches.batches_per_epoch());
        let adam = Adam::new(run.train.adam, params.tensors());
        Ok(Self {
            kind,
            model: model.clone(),
            params,
            net_len,
            adam,
            batches,
            step: 0,
            total,
            teacher_sha256: None,
            n_train,
        })
    }

    fn meta(&self, run: &RunConfig) -> CheckpointMeta {
        CheckpointMeta {
            kind: self.kind,
            task: run.task,
            model: self.model.clone(),
            run: run.clone(),
            total_steps: self.total,
            adam_step: self.adam.t,
            epoch_batches: self.batches.resume_point().1,
            teacher_sha256: self.teacher_sha256.clone(),
        }
    }

    fn checkpoint(&self, run: &RunConfig) -> Result<Checkpoint> {
        let rng = RngState::capture(&self.batches.resume_point().0);
        let mut c = Checkpoint::new(
            self.step as u64,
            rng,
            serde_json::to_string(&self.meta(run))?,
        );
        c.push_params("", &self.params);
        for (i, name) in self.params.names().iter().enumerate() {
            c.push_tensor(format!("adam.m.{name}"), &self.adam.m[i]);
            c.push_tensor(format!("adam.v.{name}"), &self.adam.v[i]);
        }
        Ok(c)
    }

    fn resume(&mut self, ckpt: &Checkpoint, run: &RunConfig) -> Result<()> {
        let meta = CheckpointMeta::parse(ckpt)?;
        if meta.kind != self.kind || meta.model != self.model || meta.run != *run {
            return config_err("resume checkpoint was written by a different run configuration");
        }
        if meta.teacher_sha256 != self.teacher_sha256 {
            return config_err("resume checkpoint was distilled from a different teacher");
        }
        let mut params = self.params.clone();
        let mut adam = self.adam.clone();
        for (i, name) in self.params.names().iter().enumerate() {
            let load = |key: &str, like: &Tensor| -> Result<Tensor> {
                let t = ckpt.tensor::<f64>(key)?;
                if t.shape() != like.shape() {
                    return config_err(format!("resume tensor `{key}` has shape {:?}", t.shape()));
                }
                Ok(t)
            };
            params.tensors_mut()[i] = load(name, &self.params.tensors()[i])?;
            adam.m[i] = load(&format!("adam.m.{name}"), &self.adam.m[i])?;
            adam.v[i] = load(&format!("adam.v.{name}"), &self.adam.v[i])?;
        }
        adam.t = meta.adam_step;
        self.batches = BatchIter::resume(
            self.n_train,
            run.train.batch_size,
            ckpt.rng.restore(),
            meta.epoch_batches,
        )?;
        self.params = params;
        self.adam = adam;
        self.step = ckpt.step as usize;
        self.total = meta.total_steps;
        Ok(())
    }

    fn net(&self) -> Result<RestorationNet> {
        let mut store = ParamStore::new();
        for (name, t) in self.params.iter().take(self.net_len) {
            store.push(&name[NET_PREFIX.len()..], t.clone());
        }
        RestorationNet::from_params(&self.model, store)
    }
}

fn batch_mean(g: &mut Graph, items: &[Var]) -> Result<Var> {
    let s = g.stack(items)?;
    g.mean(s)
}

fn diverged(state: &State, run: &RunConfig, loss: f64) -> Result<Error> {
    Ok(Error::Diverged {
        step: state.step,
        loss,
        last_good: Box::new(state.checkpoint(run)?),
    })
}

fn run_loop<F>(
    state: &mut State,
    run: &RunConfig,
    data: &Dataset,
    stop_at: Option<usize>,
    mut objective: F,
) -> Result<TrainLog>
where
    F: FnMut(&mut Graph, &[Var], &[usize]) -> Result<Terms>,
{
    let tc = &run.train;
    let mut log = TrainLog::default();
    if !data.held_out.is_empty() {
        log.degraded = Some(degraded_quality(&data.held_out)?);
    }
    let interval = if tc.eval_interval > 0 {
        tc.eval_interval
    } else {
        state.batches.batches_per_epoch()
    };
    let end = stop_at.map_or(state.total, |s| s.min(state.total));
    while state.step < end {
        let lr = cosine_lr(state.step, state.total, tc.lr_max, tc.lr_min)?;
        let mut probe = state.batches.clone();
        let batch = probe.next().expect("endless iterator");
        let mut g = Graph::new();
        let p = state.params.bind(&mut g, true);
        let terms = match objective(&mut g, &p, &batch) {
            Ok(t) => t,
            Err(Error::Evaluation(_)) => return Err(diverged(state, run, f64::NAN)?),
            Err(e) => return Err(e),
        };
        let loss = g.value(terms.total).item();
        if !loss.is_finite() {
            return Err(diverged(state, run, loss)?);
        }
        g.backward(terms.total)?;
        let grads: Vec<&[f64]> = p
            .iter()
            .map(|&v| g.grad(v).expect("trainable leaf"))
            .collect();
        let names = state.params.names().to_vec();
        state
            .adam
            .step(state.params.tensors_mut(), &grads, &names, lr)?;
        state.batches = probe;
        state.step += 1;
        let value = |v: Option<Var>| v.map_or(0.0, |v| g.value(v).item());
        log.steps.push(StepLog {
            step: state.step,
            lr,
            loss,
            rec: g.value(terms.rec).item(),
            gk: value(terms.gk),
            cl: value(terms.cl),
        });
        if !data.held_out.is_empty() && (state.step % interval == 0 || state.step == state.total) {
            let q = evaluate_net(&state.net()?, &data.held_out)?;
            log.evals.push(EvalPoint {
                step: state.step,
                psnr: q.psnr,
                ssim: q.ssim,
            });
        }
    }
    Ok(log)
}

fn check_task(run: &RunConfig, data: &Dataset) -> Result<()> {
    if data.task != run.task {
        return config_err(format!(
            "run is configured for {} but the data is {}",
            run.task, data.task
        ));
    }
    Ok(())
}

/// Minimizes the reconstruction loss alone for `model`.
pub fn train_supervised(
    kind: ModelKind,
    model: &ModelConfig,
    run: &RunConfig,
    data: &Dataset,
    opts: TrainOptions,
) -> Result<TrainOutcome> {
    run.validate()?;
    check_task(run, data)?;
    let mut state = State::fresh(kind, model, ParamStore::new(), run, data.train.len())?;
    if let Some(c) = opts.resume {
        state.resume(c, run)?;
    }
    let net = state.net()?;
    let log = run_loop(&mut state, run, data, opts.stop_at, |g, p, batch| {
        let mut recs = Vec::with_capacity(batch.len());
        for &i in batch {
            let s = &data.train[i];
            let x = g.constant(s.degraded.clone());
            let out = net.forward_graph(g, p, x)?;
            let y = g.constant(s.clean.clone());
            recs.push(reconstruction_loss(g, out.output, y)?);
        }
        let rec = batch_mean(g, &recs)?;
        Ok(Terms {
            total: rec,
            rec,
            gk: None,
            cl: None,
        })
    })?;
    Ok(TrainOutcome {
        checkpoint: state.checkpoint(run)?,
        log,
    })
}

/// Pretrains the teacher of `run` on the reconstruction loss.
pub fn train_teacher(run: &RunConfig, data: &Dataset, opts: TrainOptions) -> Result<TrainOutcome> {
    train_supervised(ModelKind::Teacher, &run.teacher, run, data, opts)
}

/// Frozen teacher outputs for one training sample.
struct TeacherView {
    features: Vec<Tensor>,
    positive: Tensor,
    negative: Tensor,
}

fn selected_taps(run: &RunConfig, tap_count: usize) -> Result<Vec<usize>> {
    let taps = run
        .train
        .distill_taps
        .clone()
        .unwrap_or_else(|| (0..tap_count).collect());
    if taps.is_empty() {
        return config_err("distill_taps selects no feature taps");
    }
    for (i, &k) in taps.iter().enumerate() {
        if k >= tap_count {
            return config_err(format!("distill tap {k} out of range for {tap_count} taps"));
        }
        if taps[..i].contains(&k) {
            return config_err(format!("distill tap {k} listed twice"));
        }
    }
    Ok(taps)
}

/// Trains the student of `run` against the frozen teacher in `teacher_ckpt` with the
/// reconstruction, kernel feature and contrastive losses.
///
/// Terms with zero weight are still evaluated for the log, on detached inputs, so
/// they cannot perturb the student's gradients.
pub fn distill(
    run: &RunConfig,
    teacher_ckpt: &Checkpoint,
    data: &Dataset,
    opts: TrainOptions,
) -> Result<TrainOutcome> {
    run.validate()?;
    check_task(run, data)?;
    let tmeta = CheckpointMeta::parse(teacher_ckpt)?;
    if tmeta.kind != ModelKind::Teacher {
        return config_err("distillation needs a teacher checkpoint");
    }
    if tmeta.model != run.teacher {
        return config_err("teacher checkpoint does not match the configured teacher model");
    }
    if tmeta.task != run.task {
        return config_err(format!(
            "teacher was trained for {} but the run is {}",
            tmeta.task, run.task
        ));
    }
    let teacher = load_net(teacher_ckpt)?;
    let Some(student_cfg) = run.student.clone() else {
        return config_err("run config has no student model");
    };
    let derived = compress_config(
        &run.teacher,
        &student_cfg.level_layers,
        student_cfg.base_channels,
    )?;
    if derived != student_cfg {
        return config_err("student must share the teacher's unified_dim and input_channels");
    }
    let w = run.train.loss_weights;
    let taps = selected_taps(run, student_cfg.tap_count())?;

    let mut rng = ChaCha8Rng::seed_from_u64(run.train.seed ^ PROJECTOR_SEED_SALT);
    let mut extra = ParamStore::new();
    let (s_ch, t_ch) = (student_cfg.tap_channels(), run.teacher.tap_channels());
    for &k in &taps {
        let ps = Projector::random(s_ch[k], student_cfg.unified_dim, &mut rng);
        let pt = Projector::random(t_ch[k], run.teacher.unified_dim, &mut rng);
        extra.push(format!("proj.student.{k}.weight"), ps.weight);
        extra.push(format!("proj.student.{k}.bias"), ps.bias);
        extra.push(format!("proj.teacher.{k}.weight"), pt.weight);
        extra.push(format!("proj.teacher.{k}.bias"), pt.bias);
    }

    let phi = PhiExtractor::new(student_cfg.input_channels, PHI_SEED);
    let views = data
        .train
        .iter()
        .map(|s| {
            let (out, feats) = teacher.forward_with_features(&s.degraded)?;
            Ok(TeacherView {
                features: feats.iter().map(|f| f.matrix()).collect(),
                positive: phi.features(&out)?,
                negative: phi.features(&s.degraded)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut state = State::fresh(
        ModelKind::Student,
        &student_cfg,
        extra,
        run,
        data.train.len(),
    )?;
    state.teacher_sha256 = Some(
        Sha256::digest(teacher_ckpt.to_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect(),
    );
    if let Some(c) = opts.resume {
        state.resume(c, run)?;
    }
    let net = state.net()?;
    let net_len = state.net_len;

    let log = run_loop(&mut state, run, data, opts.stop_at, |g, p, batch| {
        let (p_net, p_proj) = p.split_at(net_len);
        let negatives: Vec<Tensor> = batch.iter().map(|&j| views[j].negative.clone()).collect();
        let (mut recs, mut gks, mut cls) = (Vec::new(), Vec::new(), Vec::new());
        for &i in batch {
            let s = &data.train[i];
            let view = &views[i];
            let x = g.constant(s.degraded.clone());
            let out = net.forward_graph(g, p_net, x)?;
            let y = g.constant(s.clean.clone());
            recs.push(reconstruction_loss(g, out.output, y)?);

            let (mut s_proj, mut t_proj) = (Vec::new(), Vec::new());
            for (slot, &k) in taps.iter().enumerate() {
                let q = &p_proj[4 * slot..4 * slot + 4];
                let sf = if w.alpha2 == 0.0 {
                    g.detach(out.features[k])
                } else {
                    out.features[k]
                };
                s_proj.push(project(g, q[0], q[1], sf)?);
                let tf = g.constant(view.features[k].clone());
                t_proj.push(project(g, q[2], q[3], tf)?);
            }
            gks.push(gk_feature_loss(g, &s_proj, &t_proj, &w)?);

            let anchor = if w.alpha3 == 0.0 {
                g.detach(out.output)
            } else {
                out.output
            };
            cls.push(contrastive_image_loss(
                g,
                &phi,
                anchor,
                &view.positive,
                &negatives,
                w.tau,
            )?);
        }
        let rec = batch_mean(g, &recs)?;
        let gk = batch_mean(g, &gks)?;
        let cl = batch_mean(g, &cls)?;
        let total = total_loss(g, rec, gk, cl, &w)?;
        Ok(Terms {
            total,
            rec,
            gk: Some(gk),
            cl: Some(cl),
        })
    })?;
    Ok(TrainOutcome {
        checkpoint: state.checkpoint(run)?,
        log,
    })
}
