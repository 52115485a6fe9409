//! Training loop: view construction, joint structural + logical loss, two
//! optimizer groups, criterion and shadow-student updates, loss log and
//! checkpoints.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::augment::{color_jitter, strong_augment, weak_augment};
use crate::checkpoint::{self, Checkpoint};
use crate::config::{lambda1_at, RunConfig};
use crate::datasets::{to_unit_image, DatasetSplit, ImageSample};
use crate::error::{Result, SpaceError};
use crate::graph::{Graph, Gradients};
use crate::imaging::PixelImage;
use crate::losses::{logical_graph, scl_graph, CriterionState, LossBundle};
use crate::networks::{
    compute_teacher_stats, converter_forward, encoder_forward, normalize_teacher, pdn_features, pdn_forward,
    teacher_forward, Bound, Networks, ParamSet, TeacherStats,
};
use crate::optim::{AdamW, AdamWConfig};
use crate::scoring::{calibrate, Model};
use crate::tensor::Tensor;

pub const LOSS_CSV_HEADER: &str = "iter,l_ts,l_ow,l_os,l_ws,l_structural,l_fae,l_fm,l_logical,l_total,sel_o,sel_w,sel_s";

/// Teacher features above this many bytes are recomputed each step instead of cached.
const TEACHER_CACHE_LIMIT: usize = 1 << 30;

/// Mutable state of one training run.
#[derive(Clone)]
pub struct Trainer {
    pub run: RunConfig,
    pub nets: Networks,
    pub teacher_stats: TeacherStats,
    pub criterion: CriterionState,
    pub iteration: u64,
    opt_student: AdamW,
    opt_logical: AdamW,
    rng: ChaCha8Rng,
    images: Vec<PixelImage>,
    teacher_cache: Option<Vec<Tensor>>,
}

/// Where a run writes its artifacts; `None` skips the artifact.
#[derive(Debug, Clone, Default)]
pub struct TrainOutputs {
    pub checkpoint: Option<PathBuf>,
    pub loss_csv: Option<PathBuf>,
}

impl TrainOutputs {
    /// Checkpoint at `ckpt` and the loss log next to it (`<stem>.losses.csv`).
    pub fn beside(ckpt: &Path) -> Self {
        TrainOutputs {
            checkpoint: Some(ckpt.to_path_buf()),
            loss_csv: Some(ckpt.with_extension("losses.csv")),
        }
    }

    fn periodic(&self, iteration: u64) -> Option<PathBuf> {
        let ck = self.checkpoint.as_ref()?;
        let stem = ck.file_stem()?.to_string_lossy().into_owned();
        Some(ck.with_file_name(format!("{stem}-{iteration:07}.ckpt")))
    }
}

fn standardized_batch(img: &PixelImage) -> Tensor {
    let t = img.standardize();
    let (c, h, w) = (3, img.height, img.width);
    t.reshape(&[1, c, h, w]).expect("image layout")
}

fn collect_grads(grads: &Gradients, bound: &Bound) -> BTreeMap<String, Tensor> {
    bound
        .ids
        .iter()
        .filter_map(|(name, id)| grads.get(*id).map(|g| (name.clone(), g.clone())))
        .collect()
}

fn accumulate(into: &mut BTreeMap<String, Tensor>, from: BTreeMap<String, Tensor>) {
    for (k, v) in from {
        match into.get_mut(&k) {
            Some(acc) => acc.add_assign(&v),
            None => {
                into.insert(k, v);
            }
        }
    }
}

/// `shadow ← β·shadow + (1−β)·live`, parameter by parameter.
pub fn ema_update(shadow: &mut ParamSet, live: &ParamSet, beta: f32) {
    for (name, s) in shadow.tensors.iter_mut() {
        if let Some(l) = live.tensors.get(name) {
            for (a, &b) in s.data_mut().iter_mut().zip(l.data()) {
                *a = beta * *a + (1.0 - beta) * b;
            }
        }
    }
}

impl Trainer {
    /// Fresh networks (or `teacher` when given), teacher statistics and caches.
    pub fn new(run: &RunConfig, train: &[ImageSample], teacher: Option<ParamSet>) -> Result<Self> {
        run.validate()?;
        if train.is_empty() {
            return Err(SpaceError::config("training needs at least one train image"));
        }
        let mut nets = Networks::init(run.network.clone(), run.train.teacher_seed, run.train.seed)?;
        if let Some(t) = teacher {
            t.check_layout(&nets.teacher, "teacher")?;
            nets.teacher = t;
        }
        let size = run.network.input_size;
        let images: Vec<PixelImage> = train.iter().map(|s| to_unit_image(s, size)).collect();
        let inputs: Vec<Tensor> = images.iter().map(PixelImage::standardize).collect();
        let (c, h, w) = run.network.feature_shape();
        let teacher_stats = if run.train.normalize_teacher {
            compute_teacher_stats(&nets, &inputs)?
        } else {
            TeacherStats::identity(c)
        };
        let cache_bytes = images.len() * c * h * w * 4;
        let teacher_cache = if cache_bytes <= TEACHER_CACHE_LIMIT {
            let feats = inputs
                .iter()
                .map(|x| Ok(normalize_teacher(&teacher_forward(&nets, x)?, &teacher_stats)?.batched()))
                .collect::<Result<Vec<_>>>()?;
            Some(feats)
        } else {
            None
        };
        let tc = &run.train;
        Ok(Trainer {
            opt_student: AdamW::new(AdamWConfig::new(tc.learning_rate, tc.wd_student)),
            opt_logical: AdamW::new(AdamWConfig::new(tc.learning_rate, tc.wd_fe_fm)),
            rng: ChaCha8Rng::seed_from_u64(tc.seed ^ 0x5eed_0f_7a1e),
            criterion: CriterionState::new(tc.alpha_ema),
            iteration: 0,
            run: run.clone(),
            nets,
            teacher_stats,
            images,
            teacher_cache,
        })
    }

    fn teacher_on(&self, x: &Tensor) -> Result<Tensor> {
        Ok(normalize_teacher(&teacher_forward(&self.nets, x)?, &self.teacher_stats)?.batched())
    }

    /// Original, weak, strong and jittered views of train image `index`.
    fn draw_views(&mut self, index: usize) -> [PixelImage; 4] {
        let spec = &self.run.augment;
        let x_o = self.images[index].clone();
        let x_w = weak_augment(&x_o, spec, &mut self.rng);
        let x_s = strong_augment(&x_o, spec, &mut self.rng);
        let x_j = color_jitter(&weak_augment(&x_o, spec, &mut self.rng), spec, &mut self.rng);
        [x_o, x_w, x_s, x_j]
    }

    /// Loss graph and gradients for one image; criterion advances as a side effect.
    fn sample_gradients(
        &mut self,
        index: usize,
        lambda1: f32,
        weight: f32,
    ) -> Result<(LossBundle, BTreeMap<String, Tensor>, BTreeMap<String, Tensor>)> {
        let tc = self.run.train.clone();
        let cfg = self.nets.config.clone();
        let [x_o, x_w, x_s, x_j] = self.draw_views(index);

        let t_o = match &self.teacher_cache {
            Some(cache) => cache[index].clone(),
            None => self.teacher_on(&standardized_batch(&x_o))?,
        };
        let xj = standardized_batch(&x_j);
        let t_j = self.teacher_on(&xj)?;
        let shadow = if tc.student_ema_for_fm {
            &self.nets.student_ema
        } else {
            &self.nets.student
        };
        let s_j = pdn_features(&cfg, shadow, &xj)?;

        let mut g = Graph::new();
        let sp = self.nets.student.bind(&mut g, true);
        let ep = self.nets.encoder.bind(&mut g, true);
        let fp = self.nets.fm.bind(&mut g, true);

        let views = Tensor::stack(&[&x_o.standardize(), &x_w.standardize(), &x_s.standardize()])?;
        let views = g.constant(views);
        let s_all = pdn_forward(&cfg, &mut g, &sp, views)?;
        let s_o = g.batch_item(s_all, 0)?;
        let s_w = g.batch_item(s_all, 1)?;
        let s_s = g.batch_item(s_all, 2)?;
        if !g.value(s_all).all_finite() {
            return Err(SpaceError::NonFinite {
                iteration: self.iteration,
                snapshot: "student features contain non-finite values".into(),
            });
        }
        let t_o = g.constant(t_o);
        let (scl, _, structural) = scl_graph(&mut g, t_o, s_o, s_w, s_s, &mut self.criterion, lambda1)?;

        let xj = g.constant(xj);
        let ae = encoder_forward(&cfg, &mut g, &ep, xj)?;
        let t_j = g.constant(t_j);
        let s_j = g.constant(s_j);
        let (logical_nodes, logical) = logical_graph(
            &mut g,
            t_j,
            ae,
            s_j,
            |g, x| converter_forward(&cfg, g, &fp, x),
            tc.q_hard,
            tc.lambda2,
        )?;
        let total = g.add(scl.l_structural, logical_nodes.l_logical)?;
        let scaled = g.scale(total, weight);
        let bundle = structural.merge(logical);
        if !bundle.all_finite() {
            return Err(SpaceError::NonFinite {
                iteration: self.iteration,
                snapshot: format!("{bundle:?}"),
            });
        }
        let grads = g.backward(scaled)?;
        let student = collect_grads(&grads, &sp);
        let mut logical_grads = prefixed(collect_grads(&grads, &ep), "encoder.");
        accumulate(&mut logical_grads, prefixed(collect_grads(&grads, &fp), "fm."));
        Ok((bundle, student, logical_grads))
    }

    /// One optimization step over `batch_size` uniformly drawn images.
    pub fn step(&mut self) -> Result<LossBundle> {
        let tc = self.run.train.clone();
        let lambda1 = lambda1_at(self.iteration, &tc);
        let weight = 1.0 / tc.batch_size as f32;
        let mut student_grads = BTreeMap::new();
        let mut logical_grads = BTreeMap::new();
        let mut mean = LossBundle::default();
        for _ in 0..tc.batch_size {
            let index = self.rng.random_range(0..self.images.len());
            let (b, sg, lg) = self.sample_gradients(index, lambda1, weight)?;
            accumulate(&mut student_grads, sg);
            accumulate(&mut logical_grads, lg);
            mean = add_scaled(mean, &b, weight);
        }
        let lr_scale = tc.lr_scale_at(self.iteration);
        self.opt_student.step(&mut self.nets.student, &student_grads, lr_scale)?;
        let mut logical_params = merged_logical(&self.nets);
        self.opt_logical.step(&mut logical_params, &logical_grads, lr_scale)?;
        split_logical(&mut self.nets, logical_params);
        ema_update(&mut self.nets.student_ema, &self.nets.student, tc.student_weight_ema);
        self.iteration += 1;
        Ok(mean)
    }

    pub fn model(&self) -> Model {
        Model {
            nets: self.nets.clone(),
            teacher_stats: self.teacher_stats.clone(),
            ema_for_logical: self.run.train.student_ema_for_fm,
            calibration: None,
        }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model(),
            criterion: self.criterion.clone(),
            iteration: self.iteration,
            run: self.run.clone(),
        }
    }
}

fn add_scaled(acc: LossBundle, b: &LossBundle, w: f32) -> LossBundle {
    let mut v = acc.values();
    for (a, x) in v.iter_mut().zip(b.values()) {
        *a += w * x;
    }
    LossBundle {
        l_ts: v[0],
        l_ow: v[1],
        l_os: v[2],
        l_ws: v[3],
        l_structural: v[4],
        l_fae: v[5],
        l_fm: v[6],
        l_logical: v[7],
        l_total: v[8],
        selected_fraction_o: v[9],
        selected_fraction_w: v[10],
        selected_fraction_s: v[11],
    }
}

/// Encoder and converter parameters as one optimizer group.
fn merged_logical(nets: &Networks) -> ParamSet {
    let mut p = ParamSet::default();
    for (k, v) in nets.encoder.iter() {
        p.insert(&format!("encoder.{k}"), v.clone());
    }
    for (k, v) in nets.fm.iter() {
        p.insert(&format!("fm.{k}"), v.clone());
    }
    p
}

fn split_logical(nets: &mut Networks, merged: ParamSet) {
    for (k, v) in merged.tensors {
        if let Some(rest) = k.strip_prefix("encoder.") {
            nets.encoder.insert(rest, v);
        } else if let Some(rest) = k.strip_prefix("fm.") {
            nets.fm.insert(rest, v);
        }
    }
}

fn prefixed(grads: BTreeMap<String, Tensor>, prefix: &str) -> BTreeMap<String, Tensor> {
    grads.into_iter().map(|(k, v)| (format!("{prefix}{k}"), v)).collect()
}

pub fn format_loss_row(iter: u64, b: &LossBundle) -> String {
    let mut row = iter.to_string();
    for v in b.values() {
        row.push(',');
        row.push_str(&v.to_string());
    }
    row
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> SpaceError + '_ {
    move |e| SpaceError::io(path, e)
}

/// Run `run.train.iterations` steps on `data.train`, then calibrate on
/// `data.validation` and write the final checkpoint.
pub fn train(run: &RunConfig, data: &DatasetSplit, outputs: &TrainOutputs, teacher: Option<ParamSet>) -> Result<Checkpoint> {
    let mut trainer = Trainer::new(run, &data.train, teacher)?;
    let mut log = match &outputs.loss_csv {
        Some(p) => {
            let f = std::fs::File::create(p).map_err(io_err(p))?;
            let mut w = std::io::BufWriter::new(f);
            writeln!(w, "{LOSS_CSV_HEADER}").map_err(io_err(p))?;
            Some((p.clone(), w))
        }
        None => None,
    };
    let every = run.train.checkpoint_every;
    let report_every = (run.train.iterations / 20).max(1);
    for _ in 0..run.train.iterations {
        let it = trainer.iteration;
        let bundle = trainer.step()?;
        if let Some((p, w)) = log.as_mut() {
            writeln!(w, "{}", format_loss_row(it, &bundle)).map_err(io_err(p))?;
        }
        if (it + 1) % report_every == 0 {
            log::info!(
                "iter {} total {:.5} structural {:.5} logical {:.5}",
                it + 1,
                bundle.l_total,
                bundle.l_structural,
                bundle.l_logical
            );
        }
        if every > 0 && trainer.iteration % every == 0 && trainer.iteration < run.train.iterations {
            if let Some(path) = outputs.periodic(trainer.iteration) {
                checkpoint::save(&path, &trainer.checkpoint())?;
            }
        }
    }
    if let Some((p, mut w)) = log {
        w.flush().map_err(io_err(&p))?;
    }
    let mut ck = trainer.checkpoint();
    if !data.validation.is_empty() {
        ck.model.calibration = Some(calibrate(&ck.model, &data.validation)?);
    } else {
        log::warn!("no validation images; checkpoint left uncalibrated");
    }
    if let Some(p) = &outputs.checkpoint {
        checkpoint::save(p, &ck)?;
    }
    Ok(ck)
}
