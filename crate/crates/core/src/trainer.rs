//! Distillation training loop, evaluation, and gamma sweeps.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Graph;
use crate::checkpoint::Checkpoint;
use crate::config::{Splits, TrainConfig};
use crate::data::{BatchPlan, Dataset};
use crate::error::{Error, Result};
use crate::losses::{total_loss, DistillConfig, LabelBatch};
use crate::model::Network;
use crate::optim::Sgd;
use crate::similarity::{sp_loss, LayerPairSet, Taps};
use crate::tensor::{Float, Tensor};

pub const METRICS_FILE: &str = "metrics.csv";
pub const BEST_CHECKPOINT: &str = "ckpt_best";
pub const FINAL_CHECKPOINT: &str = "ckpt_final";

/// One metrics line. Epoch rows carry evaluation errors; per-step rows leave them empty.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub ce: f64,
    pub kd: Option<f64>,
    pub at: Option<f64>,
    pub sp: Option<f64>,
    pub total: f64,
    pub train_error: f64,
    pub val_error: Option<f64>,
    pub test_error: Option<f64>,
    pub wall_time: f64,
}

impl MetricsRow {
    pub const HEADER: &'static str =
        "epoch,step,lr,ce,kd,at,sp,total,train_error,val_error,test_error,wall_time";

    pub fn to_csv(&self) -> String {
        fn opt(v: Option<f64>) -> String {
            v.map(|x| x.to_string()).unwrap_or_default()
        }
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{:.3}",
            self.epoch,
            self.step,
            self.lr,
            self.ce,
            opt(self.kd),
            opt(self.at),
            opt(self.sp),
            self.total,
            self.train_error,
            opt(self.val_error),
            opt(self.test_error),
            self.wall_time
        )
    }

    pub fn parse(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim_end().split(',').collect();
        if f.len() != 12 {
            return Err(Error::Format(format!("metrics row has {} fields, expected 12", f.len())));
        }
        let num = |s: &str| -> Result<f64> {
            s.parse().map_err(|_| Error::Format(format!("bad metrics value {s:?}")))
        };
        let opt = |s: &str| -> Result<Option<f64>> { if s.is_empty() { Ok(None) } else { num(s).map(Some) } };
        let int = |s: &str| -> Result<usize> { s.parse().map_err(|_| Error::Format(format!("bad metrics index {s:?}"))) };
        Ok(MetricsRow {
            epoch: int(f[0])?,
            step: int(f[1])?,
            lr: num(f[2])?,
            ce: num(f[3])?,
            kd: opt(f[4])?,
            at: opt(f[5])?,
            sp: opt(f[6])?,
            total: num(f[7])?,
            train_error: num(f[8])?,
            val_error: opt(f[9])?,
            test_error: opt(f[10])?,
            wall_time: num(f[11])?,
        })
    }

    pub fn is_epoch_row(&self) -> bool {
        self.test_error.is_some()
    }
}

/// Parse a metrics file, skipping `#` comment lines and the header.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().filter(|l| !l.starts_with('#'));
    match lines.next() {
        Some(h) if h == MetricsRow::HEADER => {}
        _ => return Err(Error::Format(format!("{}: missing metrics header", path.display()))),
    }
    lines.filter(|l| !l.is_empty()).map(MetricsRow::parse).collect()
}

/// Top-1 error in percent. No augmentation.
pub fn evaluate<T: Float>(net: &Network<T>, data: &Dataset, batch_size: usize) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Config("cannot evaluate on an empty dataset".into()));
    }
    let mut wrong = 0usize;
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(batch_size.max(1)) {
        let (x, y) = data.batch::<T>(chunk, None)?;
        let (logits, _) = net.infer(&x, &[])?;
        wrong += count_wrong(&logits, &y);
    }
    Ok(100.0 * wrong as f64 / data.len() as f64)
}

pub fn argmax_rows<T: Float>(logits: &Tensor<T>) -> Vec<usize> {
    let cols = logits.shape()[1];
    logits
        .data()
        .chunks(cols)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

fn count_wrong<T: Float>(logits: &Tensor<T>, y: &LabelBatch) -> usize {
    argmax_rows(logits).iter().zip(y.labels()).filter(|(p, l)| p != l).count()
}

/// Mean similarity loss of `student` against `teacher` over the first
/// `n_batches` sequential batches of `data`.
pub fn measure_lsp<T: Float>(
    teacher: &Network<T>,
    student: &Network<T>,
    data: &Dataset,
    pairs: &LayerPairSet,
    n_batches: usize,
    batch_size: usize,
) -> Result<f64> {
    let indices: Vec<usize> = (0..data.len()).collect();
    let mut values = Vec::new();
    for chunk in indices.chunks(batch_size.max(1)).take(n_batches.max(1)) {
        if chunk.len() < 2 {
            continue;
        }
        let (x, _) = data.batch::<T>(chunk, None)?;
        let (_, t_taps) = teacher.infer(&x, &pairs.teacher_ids())?;
        let (_, s_taps) = student.infer(&x, &pairs.student_ids())?;
        let g = Graph::new();
        let tt: Taps<T> = t_taps.into_iter().map(|(k, v)| (k, g.constant(v))).collect();
        let st: Taps<T> = s_taps.into_iter().map(|(k, v)| (k, g.constant(v))).collect();
        values.push(sp_loss(&tt, &st, pairs)?.item().to_f64());
    }
    if values.is_empty() {
        return Err(Error::Config("no batch of at least two samples to measure the similarity loss".into()));
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

/// Loss values and gradients from one mini-batch.
pub struct StepOutput<T> {
    pub grads: Vec<Tensor<T>>,
    pub ce: f64,
    pub kd: Option<f64>,
    pub at: Option<f64>,
    pub sp: Option<f64>,
    pub total: f64,
    pub wrong: usize,
}

/// Forward the frozen teacher and the student on the same batch, build the
/// configured objective and back-propagate it into the student.
pub fn distill_step<T: Float>(
    teacher: Option<&Network<T>>,
    student: &Network<T>,
    x: &Tensor<T>,
    y: &LabelBatch,
    cfg: &DistillConfig,
) -> Result<StepOutput<T>> {
    let graph = Graph::new();
    let mut teacher_taps = Taps::new();
    let mut teacher_logits = None;
    if cfg.method.needs_teacher() {
        let teacher = teacher.ok_or_else(|| Error::Config(format!("method {} needs a teacher", cfg.method)))?;
        let (logits, taps) = teacher.infer(x, &cfg.teacher_taps())?;
        teacher_logits = Some(graph.constant(logits));
        teacher_taps = taps.into_iter().map(|(k, v)| (k, graph.constant(v))).collect();
    }
    let params = student.bind(&graph, true);
    let out = student.forward(&params, graph.constant(x.clone()), &cfg.student_taps())?;
    let terms = total_loss(&out.logits, teacher_logits.as_ref(), y, &teacher_taps, &out.taps, cfg)?;
    let total = terms.total.item().to_f64();
    if !total.is_finite() {
        return Err(Error::Numeric(format!("loss became {total}")));
    }
    let mut grads = graph.backward(terms.total)?;
    let grads = params
        .iter()
        .zip(student.params())
        .map(|(v, p)| grads.take(*v).unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();
    Ok(StepOutput {
        grads,
        ce: terms.ce.item().to_f64(),
        kd: terms.kd.map(|v| v.item().to_f64()),
        at: terms.at.map(|v| v.item().to_f64()),
        sp: terms.sp.map(|v| v.item().to_f64()),
        total,
        wrong: count_wrong(&out.logits.value(), y),
    })
}

#[derive(Debug)]
pub struct TrainOutcome<T> {
    pub student: Network<T>,
    pub best: Network<T>,
    pub best_epoch: usize,
    pub metrics: Vec<MetricsRow>,
}

fn batch_seed(seed: u64, epoch: usize, step: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add((epoch as u64) << 32)
        .wrapping_add(step as u64)
}

struct MetricsSink {
    out: Option<BufWriter<File>>,
}

impl MetricsSink {
    fn open(dir: Option<&Path>, preamble: &str) -> Result<Self> {
        let Some(dir) = dir else { return Ok(MetricsSink { out: None }) };
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(METRICS_FILE);
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut sink = MetricsSink {
            out: Some(BufWriter::new(file)),
        };
        sink.line(preamble, dir)?;
        sink.line(MetricsRow::HEADER, dir)?;
        Ok(sink)
    }

    fn line(&mut self, text: &str, dir: &Path) -> Result<()> {
        if let Some(w) = self.out.as_mut() {
            writeln!(w, "{text}").and_then(|_| w.flush()).map_err(|e| Error::io(dir.join(METRICS_FILE), e))?;
        }
        Ok(())
    }
}

fn preamble(cfg: &TrainConfig, distill: &DistillConfig, data: &Splits) -> String {
    let mut s = String::new();
    let _ = write!(
        s,
        "# seed={} precision={} method={} train={} val={} test={}",
        cfg.seed,
        cfg.precision,
        distill.method,
        data.train.len(),
        data.val.len(),
        data.test.len()
    );
    s
}

/// Extra text written as `#` comments at the top of the metrics file.
pub struct RunOutput<'a> {
    pub dir: &'a Path,
    pub notes: Vec<String>,
}

/// Train `student` under the frozen `teacher` per `distill`.
///
/// Writes `metrics.csv`, `ckpt_best` and `ckpt_final` into `out` when given.
/// The teacher is only read.
pub fn train_distilled<T: Float>(
    teacher: Option<&Network<T>>,
    mut student: Network<T>,
    cfg: &TrainConfig,
    distill: &DistillConfig,
    data: &Splits,
    out: Option<RunOutput<'_>>,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    distill.validate()?;
    if data.train.is_empty() || data.test.is_empty() {
        return Err(Error::Config("training and test sets must be nonempty".into()));
    }
    if student.spec().input_size != data.train.image_size() {
        return Err(Error::Config(format!(
            "student expects {}px inputs, data has {}px",
            student.spec().input_size,
            data.train.image_size()
        )));
    }
    if distill.method.needs_teacher() {
        let t = teacher.ok_or_else(|| Error::Config(format!("method {} needs a teacher", distill.method)))?;
        if t.spec().num_classes != student.spec().num_classes {
            return Err(Error::Config("teacher and student disagree on the class count".into()));
        }
        let (tt, st) = (t.tap_ids(), student.tap_ids());
        if distill.method.uses_sp() {
            distill.pairs.validate(&tt, &st)?;
        }
        if distill.method.uses_at() {
            distill.at_pairs.validate(&tt, &st)?;
        }
    }

    // dry run: surface tap and shape problems before any update
    let probe: Vec<usize> = (0..data.train.len().min(cfg.batch_size).max(1)).collect();
    let (x, y) = data.train.batch::<T>(&probe, None)?;
    distill_step(teacher, &student, &x, &y, distill)?;

    let dir = out.as_ref().map(|o| o.dir);
    let mut head = preamble(cfg, distill, data);
    if let Some(o) = &out {
        for n in &o.notes {
            head.push_str("\n# ");
            head.push_str(n);
        }
    }
    let mut sink = MetricsSink::open(dir, &head)?;
    let started = Instant::now();
    let plan = BatchPlan {
        batch_size: cfg.batch_size,
        seed: cfg.seed,
        drop_last: false,
    };
    let mut sgd = Sgd::new(&student, cfg.momentum, cfg.weight_decay);
    let mut metrics = Vec::new();
    let mut best: Option<(f64, usize, Network<T>)> = None;
    let mut step = 0usize;

    for epoch in 0..cfg.epochs {
        let lr = cfg.schedule.lr(epoch);
        let (mut ce, mut kd, mut at, mut sp, mut total, mut wrong, mut seen) = (0.0, 0.0, 0.0, 0.0, 0.0, 0, 0);
        for (i, batch) in plan.batches(data.train.len(), epoch).iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(batch_seed(cfg.seed, epoch, i));
            let aug = if cfg.augment { Some(&mut rng) } else { None };
            let (x, y) = data.train.batch::<T>(batch, aug)?;
            let s = distill_step(teacher, &student, &x, &y, distill)?;
            sgd.step(&mut student, &s.grads, lr)?;
            step += 1;

            let n = batch.len() as f64;
            ce += s.ce * n;
            kd += s.kd.unwrap_or(0.0) * n;
            at += s.at.unwrap_or(0.0) * n;
            sp += s.sp.unwrap_or(0.0) * n;
            total += s.total * n;
            wrong += s.wrong;
            seen += batch.len();

            if cfg.step_log_interval > 0 && step.is_multiple_of(cfg.step_log_interval) {
                let row = MetricsRow {
                    epoch,
                    step,
                    lr,
                    ce: s.ce,
                    kd: s.kd,
                    at: s.at,
                    sp: s.sp,
                    total: s.total,
                    train_error: 100.0 * s.wrong as f64 / n,
                    val_error: None,
                    test_error: None,
                    wall_time: started.elapsed().as_secs_f64(),
                };
                if let Some(d) = dir {
                    sink.line(&row.to_csv(), d)?;
                }
                metrics.push(row);
            }
        }

        let seen_f = seen as f64;
        let train_error = 100.0 * wrong as f64 / seen_f;
        let val_error = if data.val.is_empty() {
            None
        } else {
            Some(evaluate(&student, &data.val, cfg.eval_batch_size)?)
        };
        let test_error = evaluate(&student, &data.test, cfg.eval_batch_size)?;
        let row = MetricsRow {
            epoch,
            step,
            lr,
            ce: ce / seen_f,
            kd: distill.method.uses_kd().then_some(kd / seen_f),
            at: distill.method.uses_at().then_some(at / seen_f),
            sp: distill.method.uses_sp().then_some(sp / seen_f),
            total: total / seen_f,
            train_error,
            val_error,
            test_error: Some(test_error),
            wall_time: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch} lr {lr} loss {:.4} train {:.2}% val {} test {:.2}%",
            row.total,
            train_error,
            val_error.map(|v| format!("{v:.2}%")).unwrap_or_else(|| "-".into()),
            test_error
        );
        if let Some(d) = dir {
            sink.line(&row.to_csv(), d)?;
        }
        metrics.push(row);

        // lowest validation error wins; ties keep the earlier epoch
        let score = val_error.unwrap_or(train_error);
        if best.as_ref().is_none_or(|(b, _, _)| score < *b) {
            best = Some((score, epoch, student.clone()));
        }
    }

    let (_, best_epoch, best_net) = best.expect("at least one epoch ran");
    if let Some(d) = dir {
        Checkpoint::new(best_net.clone(), cfg.seed, best_epoch as u32).save(&d.join(BEST_CHECKPOINT))?;
        let mut last = Checkpoint::new(student.clone(), cfg.seed, cfg.epochs as u32);
        last.momentum = Some(sgd.velocity().to_vec());
        last.save(&d.join(FINAL_CHECKPOINT))?;
    }
    Ok(TrainOutcome {
        student,
        best: best_net,
        best_epoch,
        metrics,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub gamma: f64,
    pub val_error: Option<f64>,
    pub test_error: f64,
    pub lsp: f64,
}

impl SweepRow {
    pub const HEADER: &'static str = "gamma,val_error,test_error,lsp";

    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{}",
            self.gamma,
            self.val_error.map(|v| v.to_string()).unwrap_or_default(),
            self.test_error,
            self.lsp
        )
    }
}

/// Value with the lowest validation error; ties go to the earlier entry.
pub fn select_gamma(rows: &[SweepRow]) -> Option<f64> {
    let mut best: Option<&SweepRow> = None;
    for r in rows {
        let v = r.val_error?;
        if best.is_none_or(|b| v < b.val_error.unwrap()) {
            best = Some(r);
        }
    }
    best.map(|r| r.gamma)
}

/// One fixed-seed training run per gamma, up to `jobs` in parallel.
///
/// Each run writes into `out/gamma_<value>/` when `out` is given. The final
/// student's similarity loss is measured on the test set.
#[allow(clippy::too_many_arguments)]
pub fn gamma_sweep<T: Float>(
    values: &[f64],
    teacher: &Network<T>,
    student_init: &Network<T>,
    cfg: &TrainConfig,
    distill: &DistillConfig,
    data: &Splits,
    out: Option<&Path>,
    jobs: usize,
) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(Error::Config("gamma sweep needs at least one value".into()));
    }
    if !distill.method.uses_sp() {
        return Err(Error::Config(format!("gamma has no effect for method {}", distill.method)));
    }
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<SweepRow>>>> = Mutex::new(values.iter().map(|_| None).collect());
    let run_one = |gamma: f64| -> Result<SweepRow> {
        let d = DistillConfig { gamma, ..distill.clone() };
        let run_dir: Option<PathBuf> = out.map(|o| o.join(format!("gamma_{gamma}")));
        let outcome = train_distilled(
            Some(teacher),
            student_init.clone(),
            cfg,
            &d,
            data,
            run_dir.as_deref().map(|dir| RunOutput {
                dir,
                notes: vec![format!("gamma={gamma}")],
            }),
        )?;
        let last = outcome.metrics.iter().rev().find(|r| r.is_epoch_row()).expect("epoch row");
        let lsp = measure_lsp(teacher, &outcome.student, &data.test, &d.pairs, cfg.lsp_batches, cfg.lsp_batch_size)?;
        Ok(SweepRow {
            gamma,
            val_error: last.val_error,
            test_error: last.test_error.unwrap(),
            lsp,
        })
    };
    std::thread::scope(|scope| {
        for _ in 0..jobs.clamp(1, values.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= values.len() {
                    break;
                }
                let r = run_one(values[i]);
                results.lock().unwrap()[i] = Some(r);
            });
        }
    });
    let rows = results
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|r| r.expect("every sweep entry ran"))
        .collect::<Result<Vec<_>>>()?;
    if let Some(o) = out {
        let mut text = String::from(SweepRow::HEADER);
        text.push('\n');
        for r in &rows {
            text.push_str(&r.to_csv());
            text.push('\n');
        }
        let path = o.join("sweep.csv");
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ConvNetSpec;

    #[test]
    fn metrics_rows_round_trip() {
        let row = MetricsRow {
            epoch: 3,
            step: 40,
            lr: 0.02,
            ce: 1.2345678901234,
            kd: None,
            at: Some(0.5),
            sp: Some(1e-7),
            total: 2.0,
            train_error: 12.5,
            val_error: None,
            test_error: Some(30.0),
            wall_time: 1.25,
        };
        assert_eq!(MetricsRow::parse(&row.to_csv()).unwrap(), row);
        assert!(MetricsRow::parse("1,2,3").is_err());
    }

    #[test]
    fn gamma_selection_prefers_lowest_validation_error() {
        let row = |gamma, v| SweepRow {
            gamma,
            val_error: Some(v),
            test_error: 0.0,
            lsp: 0.0,
        };
        assert_eq!(select_gamma(&[row(10.0, 5.0), row(100.0, 4.0), row(1000.0, 4.0)]), Some(100.0));
        assert_eq!(select_gamma(&[]), None);
    }

    #[test]
    fn random_net_is_near_chance() {
        let spec = ConvNetSpec {
            input_size: 8,
            base_width: 4,
            ..ConvNetSpec::new(1, 1, 10)
        };
        let data = crate::data::SyntheticClusters::new(10, 1.0, 1, 8).unwrap().sample(40, 2);
        let errors: Vec<f64> = (0..5)
            .map(|seed| evaluate(&Network::<f32>::build(&spec, seed).unwrap(), &data, 64).unwrap())
            .collect();
        let mean = errors.iter().sum::<f64>() / errors.len() as f64;
        assert!((80.0..=100.0).contains(&mean), "{errors:?}");
    }
}
