//! Alternating adversarial training of the generator against P and C.
//!
//! Each step runs, in order: P on fakes, P on reals, C on fakes, C on reals
//! (one RMSprop update per pass), then one generator update on
//! `L_G + α·L_C + β·L_P`. The adversarial terms are gated per sample: a
//! sample whose fake labels are all ones contributes nothing to them.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::autograd::Graph;
use crate::checkpoint::Checkpoint;
use crate::config::{AdversarialForm, TrainConfig};
use crate::data::{Batch, PoseDataset};
use crate::discriminators::{
    build_discriminator, confidence_fake_labels, discriminator_term, generator_adversarial_term, pose_fake_labels,
    DiscriminatorModel, Variant,
};
use crate::error::{Error, Result};
use crate::generator::{build_generator, generator_mse_loss, GeneratorModel};
use crate::heatmap::{decode_raw, GridSpec, LandmarkSet};
use crate::metrics::{pck, Stratum};
use crate::nn::ParamSet;
use crate::optim::RmsProp;
use crate::tensor::Tensor;

/// Stream of the shuffling/augmentation RNG, disjoint from the init streams.
const TRAIN_STREAM: u64 = 16;
/// Validation threshold on the torso-normalized error.
pub const VAL_PCK_THRESHOLD: f64 = 0.2;
const EVAL_BATCH: usize = 32;

/// Loss components of one step. Discriminator entries are `None` when the
/// network is absent.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    /// Supervised heatmap objective.
    pub l_g: f64,
    /// Generator adversarial terms before weighting.
    pub adv_p: f64,
    pub adv_c: f64,
    /// Objective the generator descended.
    pub total: f64,
    /// Discriminator objectives (fake term + real term).
    pub l_p: Option<f64>,
    pub l_c: Option<f64>,
    /// Samples whose adversarial term was active.
    pub active_p: usize,
    pub active_c: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l_g: f64,
    pub l_p: Option<f64>,
    pub l_c: Option<f64>,
    pub val_pck: Option<f64>,
}

pub struct TrainState {
    pub cfg: TrainConfig,
    pub generator: GeneratorModel<f32>,
    pub pose_disc: Option<DiscriminatorModel<f32>>,
    pub conf_disc: Option<DiscriminatorModel<f32>>,
    opt_g: RmsProp<f32>,
    opt_p: Option<RmsProp<f32>>,
    opt_c: Option<RmsProp<f32>>,
    pub epoch: usize,
    pub step: usize,
    rng: ChaCha8Rng,
    pub history: Vec<EpochRecord>,
    /// Best validation score, its epoch, and the generator at that epoch.
    pub best: Option<(f64, usize, ParamSet<f32>)>,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let generator = build_generator::<f32>(cfg)?;
        let pose_disc = if cfg.uses_pose_discriminator() {
            Some(build_discriminator::<f32>(cfg, Variant::P2d)?)
        } else {
            None
        };
        let conf_disc = if cfg.uses_confidence() {
            Some(build_discriminator::<f32>(cfg, Variant::C2d)?)
        } else {
            None
        };
        let lr = cfg.learning_rate;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(TRAIN_STREAM);
        Ok(TrainState {
            opt_g: RmsProp::new(&generator.params, lr),
            opt_p: pose_disc.as_ref().map(|d| RmsProp::new(&d.params, lr)),
            opt_c: conf_disc.as_ref().map(|d| RmsProp::new(&d.params, lr)),
            cfg: cfg.clone(),
            generator,
            pose_disc,
            conf_disc,
            epoch: 0,
            step: 0,
            rng,
            history: Vec::new(),
            best: None,
        })
    }

    /// The generator with the best validation score, or the current one.
    pub fn best_generator(&self) -> GeneratorModel<f32> {
        let mut g = self.generator.clone();
        if let Some((_, _, p)) = &self.best {
            g.params = p.clone();
        }
        g
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(json!({
            "kind": "train_state",
            "config": self.cfg.to_text(),
            "epoch": self.epoch,
            "step": self.step,
            "rng": {
                "seed": hex(&self.rng.get_seed()),
                "stream": self.rng.get_stream().to_string(),
                "word_pos": self.rng.get_word_pos().to_string(),
            },
            "history": self.history,
            "best": self.best.as_ref().map(|(s, e, _)| json!({"score": s, "epoch": e})),
        }));
        ck.push_params("G", &self.generator.params);
        push_opt(&mut ck, "optG", &self.opt_g);
        if let (Some(d), Some(o)) = (&self.pose_disc, &self.opt_p) {
            ck.push_params("P", &d.params);
            push_opt(&mut ck, "optP", o);
        }
        if let (Some(d), Some(o)) = (&self.conf_disc, &self.opt_c) {
            ck.push_params("C", &d.params);
            push_opt(&mut ck, "optC", o);
        }
        if let Some((_, _, p)) = &self.best {
            ck.push_params("bestG", p);
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let m = &ck.meta;
        let bad = |what: &str| Error::Format(format!("train state: missing or bad {what}"));
        if m["kind"] != "train_state" {
            return Err(bad("kind"));
        }
        let cfg = TrainConfig::from_text(m["config"].as_str().ok_or_else(|| bad("config"))?)?;
        let mut st = TrainState::new(&cfg)?;
        st.epoch = m["epoch"].as_u64().ok_or_else(|| bad("epoch"))? as usize;
        st.step = m["step"].as_u64().ok_or_else(|| bad("step"))? as usize;
        let r = &m["rng"];
        let seed = unhex(r["seed"].as_str().ok_or_else(|| bad("rng seed"))?).ok_or_else(|| bad("rng seed"))?;
        st.rng = ChaCha8Rng::from_seed(seed);
        st.rng.set_stream(parse_num(&r["stream"]).ok_or_else(|| bad("rng stream"))? as u64);
        st.rng.set_word_pos(parse_num(&r["word_pos"]).ok_or_else(|| bad("rng position"))?);
        st.history = serde_json::from_value(m["history"].clone())?;
        ck.load_params("G", &mut st.generator.params)?;
        load_opt(ck, "optG", &mut st.opt_g)?;
        if let (Some(d), Some(o)) = (&mut st.pose_disc, &mut st.opt_p) {
            ck.load_params("P", &mut d.params)?;
            load_opt(ck, "optP", o)?;
        }
        if let (Some(d), Some(o)) = (&mut st.conf_disc, &mut st.opt_c) {
            ck.load_params("C", &mut d.params)?;
            load_opt(ck, "optC", o)?;
        }
        if let Some(b) = m["best"].as_object() {
            let mut p = st.generator.params.clone();
            ck.load_params("bestG", &mut p)?;
            let score = b["score"].as_f64().ok_or_else(|| bad("best score"))?;
            let epoch = b["epoch"].as_u64().ok_or_else(|| bad("best epoch"))? as usize;
            st.best = Some((score, epoch, p));
        }
        Ok(st)
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

fn unhex(s: &str) -> Option<[u8; 32]> {
    if s.len() != 64 {
        return None;
    }
    let mut out = [0u8; 32];
    for (i, o) in out.iter_mut().enumerate() {
        *o = u8::from_str_radix(&s[2 * i..2 * i + 2], 16).ok()?;
    }
    Some(out)
}

fn parse_num(v: &serde_json::Value) -> Option<u128> {
    v.as_str()?.parse().ok()
}

fn push_opt(ck: &mut Checkpoint, prefix: &str, o: &RmsProp<f32>) {
    for (i, t) in o.state().iter().enumerate() {
        ck.push(format!("{prefix}/{i}"), t.clone());
    }
}

fn load_opt(ck: &Checkpoint, prefix: &str, o: &mut RmsProp<f32>) -> Result<()> {
    let group = ck.group(prefix);
    if group.len() != o.state().len() {
        return Err(Error::Format(format!("{prefix}: optimizer state size mismatch")));
    }
    let mut state = Vec::with_capacity(group.len());
    for (i, ((name, t), cur)) in group.into_iter().zip(o.state()).enumerate() {
        if name != i.to_string() || t.shape() != cur.shape() {
            return Err(Error::Format(format!("{prefix}: bad optimizer entry {name}")));
        }
        state.push(t);
    }
    o.set_state(state);
    Ok(())
}

/// Landmarks decoded from each sample's `[K, H, W]` block of `values`.
pub fn decode_batch(values: &[f32], k: usize, grid: GridSpec) -> Vec<LandmarkSet> {
    let per = k * grid.cells();
    values.chunks(per).map(|c| decode_raw(c, k, grid).0).collect()
}

fn all_ones(labels: &[f64]) -> bool {
    labels.iter().all(|&v| v == 1.0)
}

fn finite(name: &str, v: f64, st: &TrainState, batch: &Batch) -> Result<()> {
    if v.is_finite() {
        return Ok(());
    }
    let detail = json!({
        "component": name,
        "value": v.to_string(),
        "indices": batch.indices,
        "image_finite": batch.images.is_finite(),
        "landmarks": batch.landmarks.iter().map(|l| l.coords().to_vec()).collect::<Vec<_>>(),
    });
    Err(Error::NonFinite {
        epoch: st.epoch,
        step: st.step,
        detail: detail.to_string(),
    })
}

/// One discriminator update of `disc` on `input` against `targets`.
fn disc_update(
    disc: &mut DiscriminatorModel<f32>,
    opt: &mut RmsProp<f32>,
    input: Tensor<f32>,
    targets: &[f32],
    form: AdversarialForm,
) -> Result<f64> {
    let mut g = Graph::new();
    let p = disc.params.bind(&mut g, true);
    let x = g.constant(input);
    let logits = disc.logits(&mut g, &p, x)?;
    let loss = discriminator_term(&mut g, logits, targets, form)?;
    let value = g.value(loss).data()[0] as f64;
    if value.is_finite() {
        let grads = g.backward(loss)?;
        let grads = disc.params.collect_grads(&p, &grads);
        opt.step(&mut disc.params, &grads);
    }
    Ok(value)
}

/// Concatenates per-sample `[C_i, H, W]` blocks along channels.
fn channel_concat(parts: &[(&[f32], usize)], b: usize, hw: usize) -> Result<Tensor<f32>> {
    let c: usize = parts.iter().map(|p| p.1).sum();
    let mut out = Vec::with_capacity(b * c * hw);
    for i in 0..b {
        for &(data, ch) in parts {
            out.extend_from_slice(&data[i * ch * hw..(i + 1) * ch * hw]);
        }
    }
    Tensor::from_vec(&[b, c, hw.isqrt(), hw.isqrt()], out)
}

/// One pass of the alternating procedure on `batch`.
pub fn train_step(st: &mut TrainState, batch: &Batch) -> Result<StepReport> {
    let cfg = st.cfg.clone();
    let b = batch.len();
    if b == 0 {
        return Err(Error::invalid("empty batch"));
    }
    let k = cfg.joints;
    let hm = cfg.heatmap_size();
    let hw = hm * hm;
    let grid = GridSpec::for_input(cfg.input_size, hm);
    let form = cfg.adversarial_form;
    let occ_on = cfg.occlusion_enabled();
    let mut report = StepReport::default();

    // The generator's forward pass is recorded once; P and C updates below do
    // not touch its parameters, so the tape stays valid for step 5.
    let mut g = Graph::new();
    let gp = st.generator.params.bind(&mut g, true);
    let x = g.constant(batch.images.clone());
    let outs = st.generator.forward(&mut g, &gp, x)?;
    let last = *outs.last().expect("at least one stack");
    let fake_pose = g.value(last.pose).data().to_vec();
    let fake_occ = last.occ.map(|v| g.value(v).data().to_vec());

    let mut p_fake: Vec<f64> = Vec::new();
    if let (Some(disc), Some(opt)) = (&mut st.pose_disc, &mut st.opt_p) {
        let preds = decode_batch(&fake_pose, k, grid);
        for i in 0..b {
            p_fake.extend(pose_fake_labels(&preds[i], &batch.landmarks[i], batch.fake_refs[i], cfg.delta)?);
        }
        let targets: Vec<f32> = p_fake.iter().map(|&v| v as f32).collect();
        let small = batch.small.data();
        let c_img = crate::imaging::CHANNELS;
        let mut fake_parts = vec![(small, c_img), (&fake_pose[..], k)];
        let mut real_parts = vec![(small, c_img), (&batch.pose[..], k)];
        if let Some(o) = &fake_occ {
            fake_parts.push((&o[..], k));
            real_parts.push((&batch.occ[..], k));
        }
        // Step 1: fakes against their distance labels.
        let l1 = disc_update(disc, opt, channel_concat(&fake_parts, b, hw)?, &targets, form)?;
        // Step 2: ground truth against ones.
        let ones = vec![1.0f32; b * k];
        let l2 = disc_update(disc, opt, channel_concat(&real_parts, b, hw)?, &ones, form)?;
        report.l_p = Some(l1 + l2);
    }

    let mut c_fake: Vec<f64> = Vec::new();
    if let (Some(disc), Some(opt)) = (&mut st.conf_disc, &mut st.opt_c) {
        let eps = cfg.epsilon();
        for i in 0..b {
            let r = i * k * hw..(i + 1) * k * hw;
            c_fake.extend(confidence_fake_labels(&fake_pose[r.clone()], &batch.pose[r], k, eps)?);
        }
        let targets: Vec<f32> = c_fake.iter().map(|&v| v as f32).collect();
        let mut fake_parts = vec![(&fake_pose[..], k)];
        let mut real_parts = vec![(&batch.pose[..], k)];
        if let Some(o) = &fake_occ {
            fake_parts.push((&o[..], k));
            real_parts.push((&batch.occ[..], k));
        }
        // Steps 3 and 4.
        let l3 = disc_update(disc, opt, channel_concat(&fake_parts, b, hw)?, &targets, form)?;
        let ones = vec![1.0f32; b * k];
        let l4 = disc_update(disc, opt, channel_concat(&real_parts, b, hw)?, &ones, form)?;
        report.l_c = Some(l3 + l4);
    }

    // Step 5: generator update.
    let gt_occ = occ_on.then_some(&batch.occ[..]);
    let sup = generator_mse_loss(&mut g, &outs, &batch.pose, gt_occ, &batch.mask)?;
    report.l_g = g.value(sup).data()[0] as f64;
    let mut terms = vec![(sup, 1.0f32)];
    let active = |labels: &[f64]| labels.chunks(k).filter(|l| !all_ones(l)).count();
    if let Some(disc) = &st.pose_disc {
        report.active_p = active(&p_fake);
        if cfg.beta > 0.0 && report.active_p > 0 {
            let dp = disc.params.bind(&mut g, false);
            let img = g.constant(batch.small.clone());
            let logits = disc.forward_p(&mut g, &dp, img, last.pose, last.occ)?;
            if let Some(t) = generator_adversarial_term(&mut g, logits, &p_fake, form)? {
                report.adv_p = g.value(t).data()[0] as f64;
                terms.push((t, cfg.beta as f32));
            }
        }
    }
    if let Some(disc) = &st.conf_disc {
        report.active_c = active(&c_fake);
        if cfg.alpha > 0.0 && report.active_c > 0 {
            let dp = disc.params.bind(&mut g, false);
            let logits = disc.forward_c(&mut g, &dp, last.pose, last.occ)?;
            if let Some(t) = generator_adversarial_term(&mut g, logits, &c_fake, form)? {
                report.adv_c = g.value(t).data()[0] as f64;
                terms.push((t, cfg.alpha as f32));
            }
        }
    }
    let total = g.weighted_sum(&terms)?;
    report.total = g.value(total).data()[0] as f64;

    finite("L_G", report.l_g, st, batch)?;
    finite("L_P(discriminator)", report.l_p.unwrap_or(0.0), st, batch)?;
    finite("L_C(discriminator)", report.l_c.unwrap_or(0.0), st, batch)?;
    finite("total", report.total, st, batch)?;

    let grads = g.backward(total)?;
    let grads = st.generator.params.collect_grads(&gp, &grads);
    if let Some(bad) = grads.iter().position(|t| !t.is_finite()) {
        let name = st.generator.params.name(st.generator.params.ids().nth(bad).unwrap()).to_string();
        finite(&format!("gradient of {name}"), f64::NAN, st, batch)?;
    }
    st.opt_g.step(&mut st.generator.params, &grads);
    st.step += 1;
    Ok(report)
}

/// Last-stack raw pose heatmaps of the generator for every example.
pub fn predict_heatmaps(model: &GeneratorModel<f32>, ds: &PoseDataset) -> Result<Vec<f32>> {
    let mut out = Vec::new();
    let idx: Vec<usize> = (0..ds.len()).collect();
    for chunk in idx.chunks(EVAL_BATCH) {
        let b = ds.plain_batch(chunk)?;
        let outs = model.predict(&b.images)?;
        out.extend_from_slice(outs.last().expect("at least one stack").0.data());
    }
    Ok(out)
}

/// Decoded predictions in crop pixels, with the matching ground truth.
pub fn predict_landmarks(model: &GeneratorModel<f32>, ds: &PoseDataset) -> Result<Vec<LandmarkSet>> {
    let hm = predict_heatmaps(model, ds)?;
    Ok(decode_batch(&hm, ds.joints, ds.grid))
}

/// PCK at [`VAL_PCK_THRESHOLD`] over all in-image joints.
pub fn validation_pck(model: &GeneratorModel<f32>, ds: &PoseDataset) -> Result<f64> {
    let preds = predict_landmarks(model, ds)?;
    let gts: Vec<LandmarkSet> = ds.examples().iter().map(|e| e.landmarks.clone()).collect();
    let refs: Vec<f64> = ds.examples().iter().map(|e| e.eval_ref).collect();
    Ok(pck(&preds, &gts, &refs, VAL_PCK_THRESHOLD, Stratum::All)?.mean)
}

#[derive(Clone, Debug, Default)]
pub struct LoopOptions {
    /// Directory for `history.csv` and checkpoints; nothing is written
    /// without it.
    pub out_dir: Option<PathBuf>,
    /// Per-epoch progress on stderr.
    pub verbose: bool,
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.9}")).unwrap_or_default();
    let mut s = String::from("epoch,L_G,L_P,L_C,val_PCK\n");
    for r in history {
        let _ = writeln!(s, "{},{:.9},{},{},{}", r.epoch, r.l_g, opt(r.l_p), opt(r.l_c), opt(r.val_pck));
    }
    s
}

fn write_atomic(path: &Path, text: &str) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, text)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Trains from a fresh state until the epoch budget or a validation plateau.
pub fn train_loop(cfg: &TrainConfig, train: &PoseDataset, val: Option<&PoseDataset>, opts: &LoopOptions) -> Result<TrainState> {
    let st = TrainState::new(cfg)?;
    resume_loop(st, train, val, opts)
}

/// Continues `st` until `st.cfg.epochs` epochs are done.
pub fn resume_loop(mut st: TrainState, train: &PoseDataset, val: Option<&PoseDataset>, opts: &LoopOptions) -> Result<TrainState> {
    let cfg = st.cfg.clone();
    train.check(&cfg)?;
    if let Some(v) = val {
        v.check(&cfg)?;
    }
    if let Some(dir) = &opts.out_dir {
        fs::create_dir_all(dir)?;
    }
    let mut order: Vec<usize> = (0..train.len()).collect();
    while st.epoch < cfg.epochs {
        if cfg.patience > 0 {
            if let Some((_, best_epoch, _)) = &st.best {
                if st.epoch - best_epoch >= cfg.patience {
                    break;
                }
            }
        }
        let started = std::time::Instant::now();
        order.sort_unstable();
        order.shuffle(&mut st.rng);
        let (mut lg, mut lp, mut lc, mut n) = (0.0, 0.0, 0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let batch = train.batch(chunk, &mut st.rng)?;
            let r = match train_step(&mut st, &batch) {
                Ok(r) => r,
                Err(e @ Error::NonFinite { .. }) => {
                    if let (Some(dir), Error::NonFinite { detail, .. }) = (&opts.out_dir, &e) {
                        fs::write(dir.join("nonfinite_batch.json"), detail)?;
                    }
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            let w = chunk.len() as f64;
            lg += r.l_g * w;
            lp += r.l_p.unwrap_or(0.0) * w;
            lc += r.l_c.unwrap_or(0.0) * w;
            n += chunk.len();
        }
        st.epoch += 1;
        let n = n as f64;
        let val_pck = val.map(|v| validation_pck(&st.generator, v)).transpose()?;
        if let Some(s) = val_pck {
            if st.best.as_ref().map_or(true, |b| s > b.0) {
                st.best = Some((s, st.epoch, st.generator.params.clone()));
            }
        }
        st.history.push(EpochRecord {
            epoch: st.epoch,
            l_g: lg / n,
            l_p: st.pose_disc.as_ref().map(|_| lp / n),
            l_c: st.conf_disc.as_ref().map(|_| lc / n),
            val_pck,
        });
        if opts.verbose {
            let r = st.history.last().unwrap();
            tracing::info!(
                epoch = r.epoch,
                l_g = r.l_g,
                l_p = r.l_p,
                l_c = r.l_c,
                val_pck = r.val_pck,
                seconds = started.elapsed().as_secs_f64(),
                "epoch done"
            );
        }
        if let Some(dir) = &opts.out_dir {
            write_atomic(&dir.join("history.csv"), &history_csv(&st.history))?;
            if cfg.checkpoint_every > 0 && st.epoch % cfg.checkpoint_every == 0 {
                st.to_checkpoint().save(&dir.join(format!("checkpoint_e{:03}.spck", st.epoch)))?;
            }
        }
    }
    if let Some(dir) = &opts.out_dir {
        write_atomic(&dir.join("history.csv"), &history_csv(&st.history))?;
        st.to_checkpoint().save(&dir.join("checkpoint.spck"))?;
        save_generator(&st.best_generator(), &cfg, &dir.join("model.spck"))?;
    }
    Ok(st)
}

/// Standalone generator file for evaluation.
pub fn save_generator(model: &GeneratorModel<f32>, cfg: &TrainConfig, path: &Path) -> Result<()> {
    let mut ck = Checkpoint::new(json!({"kind": "generator", "config": cfg.to_text()}));
    ck.push_params("G", &model.params);
    ck.save(path)
}

/// Loads a generator from a `model.spck` or a full training checkpoint (its
/// best snapshot when present).
pub fn load_generator(path: &Path) -> Result<(GeneratorModel<f32>, TrainConfig)> {
    let ck = Checkpoint::load(path)?;
    match ck.meta["kind"].as_str() {
        Some("generator") => {
            let cfg = TrainConfig::from_text(ck.meta["config"].as_str().unwrap_or(""))?;
            let mut g = build_generator::<f32>(&cfg)?;
            ck.load_params("G", &mut g.params)?;
            Ok((g, cfg))
        }
        Some("train_state") => {
            let st = TrainState::from_checkpoint(&ck)?;
            Ok((st.best_generator(), st.cfg))
        }
        _ => Err(Error::Format(format!("{} is not a generator checkpoint", path.display()))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate_dataset, SkeletonSpec, SynthConfig};

    fn tiny(baseline: bool) -> TrainConfig {
        TrainConfig {
            stacks: 1,
            width: 8,
            input_size: 32,
            hourglass_depth: 2,
            disc_width: 4,
            disc_depth: 2,
            batch_size: 4,
            epochs: 2,
            baseline,
            seed: 3,
            ..Default::default()
        }
    }

    fn data(cfg: &TrainConfig, n: usize, first: u64) -> PoseDataset {
        let spec = SkeletonSpec::default();
        let synth = SynthConfig::default();
        let s = generate_dataset(&spec, &synth, n, first).unwrap();
        PoseDataset::from_samples(&s, &synth, cfg, &spec).unwrap()
    }

    #[test]
    fn step_reports_every_component() {
        let cfg = tiny(false);
        let ds = data(&cfg, 4, 0);
        let mut st = TrainState::new(&cfg).unwrap();
        let b = ds.plain_batch(&[0, 1, 2, 3]).unwrap();
        let r = train_step(&mut st, &b).unwrap();
        assert!(r.l_g > 0.0 && r.l_p.unwrap() > 0.0 && r.l_c.unwrap() > 0.0);
        assert!(r.total >= r.l_g);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn alpha_zero_never_builds_c() {
        let cfg = TrainConfig { alpha: 0.0, ..tiny(false) };
        let st = TrainState::new(&cfg).unwrap();
        assert!(st.conf_disc.is_none() && st.pose_disc.is_some());
        let base = TrainState::new(&tiny(true)).unwrap();
        assert!(base.conf_disc.is_none() && base.pose_disc.is_none());
    }

    #[test]
    fn discriminators_update_before_generator() {
        let cfg = tiny(false);
        let ds = data(&cfg, 4, 0);
        let mut st = TrainState::new(&cfg).unwrap();
        let p0 = st.pose_disc.as_ref().unwrap().params.clone();
        let b = ds.plain_batch(&[0, 1, 2, 3]).unwrap();
        train_step(&mut st, &b).unwrap();
        let p1 = &st.pose_disc.as_ref().unwrap().params;
        assert!(p0.iter().zip(p1.iter()).any(|(a, b)| a.1 != b.1));
    }

    #[test]
    fn state_round_trips_and_resumes_identically() {
        let cfg = TrainConfig { epochs: 1, ..tiny(false) };
        let ds = data(&cfg, 8, 0);
        let val = data(&cfg, 4, 100);
        let opts = LoopOptions::default();
        let st = train_loop(&cfg, &ds, Some(&val), &opts).unwrap();
        let bytes = st.to_checkpoint().to_bytes().unwrap();
        let back = TrainState::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(back.to_checkpoint().to_bytes().unwrap(), bytes);

        // One more epoch from the restored state equals two epochs straight.
        let two = TrainConfig { epochs: 2, ..cfg.clone() };
        let straight = train_loop(&two, &ds, Some(&val), &opts).unwrap();
        let mut resumed = back;
        resumed.cfg.epochs = 2;
        let resumed = resume_loop(resumed, &ds, Some(&val), &opts).unwrap();
        assert_eq!(straight.history, resumed.history);
        assert_eq!(straight.generator.params.iter().map(|p| p.1.clone()).collect::<Vec<_>>(),
                   resumed.generator.params.iter().map(|p| p.1.clone()).collect::<Vec<_>>());
    }

    #[test]
    fn mismatched_dataset_is_rejected_before_training() {
        let cfg = tiny(true);
        let ds = data(&cfg, 4, 0);
        let other = TrainConfig { input_size: 64, ..cfg };
        assert!(train_loop(&other, &ds, None, &LoopOptions::default()).is_err());
    }
}
