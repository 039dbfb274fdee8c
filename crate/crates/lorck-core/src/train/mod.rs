//! Experiment orchestration: the deterministic training loop, checkpoints,
//! evaluation, and run-directory artifacts.
//!
//! All stochasticity is derived from `(seed, iteration)` counters, so
//! resuming from a checkpoint replays exactly the run that would have
//! happened without the interruption; identical seeds give byte-identical
//! metrics files.

mod config;

pub use config::{lr_at, ExperimentConfig, LossMode, MaskSourceKind};

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::arch::{build_network, default_annulus_masks, hollow_layers, Network};
use crate::data::{resize_nearest, Dataset, Split};
use crate::error::{Error, Result};
use crate::hollow::{mask_from_annotation, HollowMask};
use crate::io::Archive;
use crate::loss::{a1_losses, combined_loss, dice_metric, Class};
use crate::optim::MaskedAdam;
use crate::tensor::{Element, Tape, Tensor};

/// Worker-thread cap from `LORCK_THREADS`; 1 means fully deterministic
/// single-thread mode (per-run results are bit-identical either way).
pub fn thread_cap() -> usize {
    std::env::var("LORCK_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&v| v >= 1)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Deterministic per-iteration batch RNG.
fn iter_rng(seed: u64, iteration: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(iteration)))
}

/// Sample `batch` distinct slice ids for one iteration.
fn sample_slices(seed: u64, iteration: u64, pool: &[(usize, usize)], batch: usize) -> Vec<(usize, usize)> {
    let mut rng = iter_rng(seed, iteration);
    let take = batch.min(pool.len());
    let mut picked = Vec::with_capacity(take);
    let mut seen = std::collections::HashSet::new();
    while picked.len() < take {
        let at = rng.gen_range(0..pool.len());
        if seen.insert(at) {
            picked.push(pool[at]);
        }
    }
    picked
}

/// Build the hollow masks an experiment needs, honoring the mask source.
pub fn prepare_masks<E: Element>(
    cfg: &ExperimentConfig,
    dataset: Option<&Dataset>,
) -> Result<HashMap<String, Arc<HollowMask>>> {
    let net_cfg = cfg.network_config()?;
    match cfg.mask_source {
        MaskSourceKind::Annulus => default_annulus_masks(&net_cfg),
        MaskSourceKind::Annotation => {
            let dataset = dataset.ok_or_else(|| {
                Error::Data("mask_source = annotation needs the dataset loaded".into())
            })?;
            let mut masks = HashMap::new();
            let pool = dataset.slice_ids(Split::Train);
            let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(cfg.seed ^ 0x6d61736b));
            for (name, k) in hollow_layers(&net_cfg) {
                let mut found = None;
                for _ in 0..64 {
                    let (s, t) = pool[rng.gen_range(0..pool.len())];
                    let plane = dataset.mask_plane(s, t, Class::OuterWall as usize);
                    if plane.iter().all(|&v| v == 0) {
                        continue;
                    }
                    if let Ok(mask) = mask_from_annotation(plane, dataset.meta.size, k) {
                        found = Some(mask);
                        break;
                    }
                }
                let mask = found.ok_or_else(|| {
                    Error::Data(format!(
                        "no training annotation produced a valid {0}x{0} band for {1}",
                        k, name
                    ))
                })?;
                masks.insert(name.to_string(), Arc::new(mask));
            }
            Ok(masks)
        }
    }
}

/// Final state of a finished run.
pub struct TrainReport {
    pub iterations: u64,
    pub loss_history: Vec<f64>,
    pub final_test_dice: Vec<f64>,
    pub checkpoint_path: PathBuf,
    pub metrics_path: PathBuf,
}

/// Per-stack evaluation rows plus per-class aggregates.
pub struct EvalReport {
    pub split: Split,
    /// (stack index, per-class dice)
    pub rows: Vec<(usize, Vec<f64>)>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Classes empty in both prediction and truth on every stack.
    pub degenerate_classes: Vec<usize>,
}

impl EvalReport {
    /// Rows in the comparison-table layout: class columns with mean and
    /// standard deviation.
    pub fn table(&self, label: &str) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<28}{:>20}{:>20}{:>20}",
            "Architecture", "Inner Wall", "Outer Wall", "Tumor"
        );
        let _ = write!(out, "{:<28}", label);
        for c in 0..3 {
            let _ = write!(out, "{:>12.3} ± {:.3}", self.mean[c], self.std[c]);
        }
        let _ = writeln!(out);
        out
    }
}

/// Evaluate a network over every stack of a split. With `LORCK_THREADS > 1`
/// the stacks are sharded across workers (each owning a clone of the
/// network) and merged in stack order, so the report is identical to the
/// single-thread one.
pub fn evaluate<E: Element>(net: &Network<E>, dataset: &Dataset, split: Split) -> Result<EvalReport> {
    let stacks = dataset.stack_ids(split);
    let mut rows: Vec<(usize, Vec<f64>)> = Vec::with_capacity(stacks.len());
    let workers = thread_cap().min(stacks.len()).max(1);
    if workers == 1 {
        for &s in &stacks {
            rows.push((s, eval_stack(net, dataset, s)?));
        }
    } else {
        let chunks: Vec<Vec<usize>> =
            stacks.chunks(stacks.len().div_ceil(workers)).map(|c| c.to_vec()).collect();
        let results: Result<Vec<Vec<(usize, Vec<f64>)>>> = std::thread::scope(|scope| {
            let handles: Vec<_> = chunks
                .iter()
                .map(|chunk| {
                    let worker_net = net.clone();
                    scope.spawn(move || -> Result<Vec<(usize, Vec<f64>)>> {
                        let mut part = Vec::with_capacity(chunk.len());
                        for &s in chunk {
                            part.push((s, eval_stack(&worker_net, dataset, s)?));
                        }
                        Ok(part)
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("eval worker panicked")).collect()
        });
        for part in results? {
            rows.extend(part);
        }
        rows.sort_by_key(|(s, _)| *s);
    }

    let classes = rows.first().map(|(_, d)| d.len()).unwrap_or(3);
    let mut mean = vec![0.0; classes];
    let mut std = vec![0.0; classes];
    for (_, dice) in &rows {
        for (c, &d) in dice.iter().enumerate() {
            mean[c] += d;
        }
    }
    let n = rows.len().max(1) as f64;
    for m in mean.iter_mut() {
        *m /= n;
    }
    for (_, dice) in &rows {
        for (c, &d) in dice.iter().enumerate() {
            std[c] += (d - mean[c]) * (d - mean[c]);
        }
    }
    for s in std.iter_mut() {
        *s = (*s / n).sqrt();
    }

    // a class absent from every stack (truth and prediction) follows the
    // empty-vs-empty convention; surface it
    let mut degenerate = Vec::new();
    for c in 0..classes {
        let all_empty = stacks.iter().all(|&s| {
            (0..dataset.meta.seq_len).all(|t| dataset.mask_plane(s, t, c).iter().all(|&v| v == 0))
        });
        if all_empty {
            degenerate.push(c);
        }
    }
    Ok(EvalReport { split, rows, mean, std, degenerate_classes: degenerate })
}

fn eval_stack<E: Element>(net: &Network<E>, dataset: &Dataset, stack: usize) -> Result<Vec<f64>> {
    let (images, masks) = dataset.stack_batch::<E>(stack);
    let tape = Tape::new();
    let out = if net.config.temporal.is_some() || net.config.bilstm.is_some() {
        net.forward_stack(&tape, &images, false)?
    } else {
        net.forward_spatial(&tape, &images, false)?
    };
    dice_metric(&tape.value(out.pred), &masks, 0.5)
}

struct MetricsWriter {
    file: fs::File,
}

impl MetricsWriter {
    fn create(path: &Path) -> Result<Self> {
        let mut file = fs::File::create(path)?;
        writeln!(file, "iteration,split,class,dice")?;
        Ok(MetricsWriter { file })
    }

    fn append(path: &Path) -> Result<Self> {
        Ok(MetricsWriter { file: fs::OpenOptions::new().append(true).open(path)? })
    }

    fn write_eval(&mut self, iteration: u64, report: &EvalReport) -> Result<()> {
        for (c, class) in Class::ALL.iter().enumerate() {
            writeln!(
                self.file,
                "{},{},{},{}",
                iteration,
                report.split.name(),
                class.name(),
                report.mean[c]
            )?;
        }
        Ok(())
    }
}

/// Checkpoint file name for an iteration count.
pub fn checkpoint_name(iteration: u64) -> String {
    format!("ckpt-{:07}.lorck", iteration)
}

fn save_checkpoint<E: Element>(
    path: &Path,
    net: &Network<E>,
    opt: &MaskedAdam<E>,
    iteration: u64,
    model_hash: u64,
) -> Result<()> {
    let mut ar = Archive::new();
    net.save_state(&mut ar);
    opt.save_into(&mut ar, "adam");
    ar.put_scalar("iteration", iteration as f64);
    ar.put_scalar("model_hash", f64::from_bits(model_hash));
    ar.write(path)
}

/// Restore a checkpoint into a freshly built network/optimizer pair.
pub fn load_checkpoint<E: Element>(
    path: &Path,
    net: &mut Network<E>,
    opt: &mut MaskedAdam<E>,
    expect_hash: u64,
) -> Result<u64> {
    let ar = Archive::read(path)?;
    let stored = ar.scalar("model_hash")?.to_bits();
    if stored != expect_hash {
        return Err(Error::Config(format!(
            "checkpoint {} was written by a different experiment configuration",
            path.display()
        )));
    }
    net.load_state(&ar)?;
    opt.load_from(&ar, "adam", net.params.len())?;
    Ok(ar.scalar("iteration")? as u64)
}

/// Run (or resume) one training job; everything lands under
/// `config.out_dir`: `config.resolved`, `metrics.csv`, `loss.csv`,
/// `ckpt-*.lorck`.
pub fn train<E: Element>(config: &ExperimentConfig) -> Result<TrainReport> {
    let dataset = Dataset::load(&config.dataset)?;
    if config.stack_mode() && dataset.meta.seq_len != config.seq_len {
        return Err(Error::Data(format!(
            "dataset stacks have {} slices, config wants {}",
            dataset.meta.seq_len, config.seq_len
        )));
    }
    let net_cfg = config.network_config()?;
    let masks = prepare_masks::<E>(config, Some(&dataset))?;
    let mut net: Network<E> = build_network(&net_cfg, &masks, config.seed)?;
    let mut opt = MaskedAdam::new(config.optimizer);
    let model_hash = config.model_hash();

    fs::create_dir_all(&config.out_dir)?;
    fs::write(config.out_dir.join("config.resolved"), config.resolved_text())?;
    let metrics_path = config.out_dir.join("metrics.csv");
    let loss_path = config.out_dir.join("loss.csv");

    let start = match &config.resume {
        Some(path) => load_checkpoint(path, &mut net, &mut opt, model_hash)?,
        None => 0,
    };
    if start == 0 || !metrics_path.exists() {
        let _ = MetricsWriter::create(&metrics_path)?;
    }
    if start == 0 || !loss_path.exists() {
        let mut f = fs::File::create(&loss_path)?;
        writeln!(f, "iteration,loss")?;
    }
    if start >= config.iterations {
        return Err(Error::Config(format!(
            "checkpoint is already at iteration {}, nothing to train",
            start
        )));
    }

    let mut metrics = MetricsWriter::append(&metrics_path)?;
    let mut loss_file = fs::OpenOptions::new().create(true).append(true).open(&loss_path)?;

    let train_slices = dataset.slice_ids(Split::Train);
    let train_stacks = dataset.stack_ids(Split::Train);
    let mut loss_history = Vec::with_capacity((config.iterations - start) as usize);

    for iteration in start..config.iterations {
        let lr = lr_at(config.lr, config.lr_decay_factor, config.lr_decay_period, iteration);
        let tape: Tape<E> = Tape::new();

        let (out, target) = if config.stack_mode() {
            let mut rng = iter_rng(config.seed, iteration);
            let stack = train_stacks[rng.gen_range(0..train_stacks.len())];
            let (images, masks_t) = dataset.stack_batch::<E>(stack);
            (net.forward_stack(&tape, &images, true)?, masks_t)
        } else {
            let ids = sample_slices(config.seed, iteration, &train_slices, config.batch_size);
            let (images, masks_t) = dataset.spatial_batch::<E>(&ids);
            (net.forward_spatial(&tape, &images, true)?, masks_t)
        };

        let loss = match config.loss_mode {
            LossMode::Combined => combined_loss(&tape, out.pred, &target, &config.weights)?,
            LossMode::A1(mode) => {
                let kernels = out.tiny_kernels.ok_or_else(|| {
                    Error::Config("A1 loss modes need a kernel-generating model".into())
                })?;
                let k = tape.shape(kernels)[3];
                // outer-wall target at kernel scale
                let ow = Class::OuterWall as usize;
                let shape = target.shape().to_vec();
                let hw = shape[2] * shape[3];
                let n = shape[0];
                let mut ow_plane = Vec::with_capacity(n * hw);
                for i in 0..n {
                    let base = (i * shape[1] + ow) * hw;
                    ow_plane.extend_from_slice(&target.data()[base..base + hw]);
                }
                let ow_t = Tensor::from_vec(vec![n, 1, shape[2], shape[3]], ow_plane)?;
                let ow_small = resize_nearest(&ow_t, k, k)?;
                let logits = net.a1_logits.map(|id| out.binding.var(id));
                a1_losses(&tape, out.pred, &target, &config.weights, kernels, &ow_small, logits, mode)?
            }
        };

        let loss_value = tape.value(loss).data()[0].to_f64();
        if !loss_value.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite loss {} at iteration {} (seed {}, batch of iteration {})",
                loss_value, iteration, config.seed, iteration
            )));
        }
        tape.backward(loss)?;
        net.params
            .absorb_grads(&tape, &out.binding)
            .map_err(|e| Error::Numerical(format!("{} at iteration {}", e, iteration)))?;
        opt.step(&mut net.params, lr)?;

        writeln!(loss_file, "{},{}", iteration, loss_value)?;
        loss_history.push(loss_value);

        let done = iteration + 1;
        if config.eval_period > 0 && done % config.eval_period == 0 && done < config.iterations {
            let report = evaluate(&net, &dataset, Split::Test)?;
            metrics.write_eval(done, &report)?;
        }
    }

    let report = evaluate(&net, &dataset, Split::Test)?;
    metrics.write_eval(config.iterations, &report)?;
    let ckpt_path = config.out_dir.join(checkpoint_name(config.iterations));
    save_checkpoint(&ckpt_path, &net, &opt, config.iterations, model_hash)?;

    Ok(TrainReport {
        iterations: config.iterations,
        loss_history,
        final_test_dice: report.mean,
        checkpoint_path: ckpt_path,
        metrics_path,
    })
}

/// Rebuild the network of an experiment and load a checkpoint into it.
pub fn restore_network<E: Element>(config: &ExperimentConfig, ckpt: &Path) -> Result<Network<E>> {
    let dataset = Dataset::load(&config.dataset).ok();
    let net_cfg = config.network_config()?;
    let masks = prepare_masks::<E>(config, dataset.as_ref())?;
    let mut net: Network<E> = build_network(&net_cfg, &masks, config.seed)?;
    let mut opt = MaskedAdam::new(config.optimizer);
    load_checkpoint(ckpt, &mut net, &mut opt, config.model_hash())?;
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iteration_rng_is_decoupled_across_iterations() {
        let a: Vec<u64> = (0..4).map(|i| iter_rng(7, i).gen()).collect();
        let b: Vec<u64> = (0..4).map(|i| iter_rng(7, i).gen()).collect();
        assert_eq!(a, b);
        let c: Vec<u64> = (0..4).map(|i| iter_rng(8, i).gen()).collect();
        assert_ne!(a, c);
    }

    #[test]
    fn sampled_batches_are_distinct_ids() {
        let pool: Vec<(usize, usize)> = (0..30).map(|i| (i / 10, i % 10)).collect();
        let batch = sample_slices(3, 17, &pool, 8);
        assert_eq!(batch.len(), 8);
        let set: std::collections::HashSet<_> = batch.iter().collect();
        assert_eq!(set.len(), 8);
    }
}
