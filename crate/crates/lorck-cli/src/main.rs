//! Experiment command line: dataset synthesis, training, evaluation, the
//! kernel-scale study, kernel export, model tables, and panel rendering.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use lorck_core::arch::{build_network, describe};
use lorck_core::data::{Dataset, Split};
use lorck_core::error::{Error, Result};
use lorck_core::io::pnm;
use lorck_core::loss::Class;
use lorck_core::synth::{
    gen_dataset, gen_hollow_object, kernel_scale_study, HollowObjectParams, ShapeFamily,
};
use lorck_core::tensor::{Tape, Tensor};
use lorck_core::train::{evaluate, prepare_masks, restore_network, train, ExperimentConfig};

#[derive(Parser)]
#[command(name = "lorck", about = "Hollow-kernel segmentation experiments", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Experiment config file (flat `key = value` lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override single keys, e.g. `--set model=A2-2.1`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::from_file(path)?,
            None => ExperimentConfig::default(),
        };
        cfg.apply_overrides(&self.overrides)?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic phantom dataset into the configured path.
    Synth(ConfigArgs),
    /// Train (or resume) the configured experiment.
    Train(ConfigArgs),
    /// Evaluate a checkpoint on a dataset split.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        /// Dataset split to evaluate.
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Convolve a hollow object with kernels of several scales and score
    /// the boundary emphasis of each output.
    KernelStudy(ConfigArgs),
    /// Write hollow kernel slices as PGM mosaics.
    ExportKernels(ConfigArgs),
    /// Print the first-three-block layer table of a model.
    DescribeModel(ConfigArgs),
    /// Render image / ground truth / prediction panels of one stack.
    Render(ConfigArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(args) => cmd_synth(&args.load()?),
        Command::Train(args) => cmd_train(&args.load()?),
        Command::Eval { config, split } => cmd_eval(&config.load()?, &split),
        Command::KernelStudy(args) => cmd_kernel_study(&args.load()?),
        Command::ExportKernels(args) => cmd_export_kernels(&args.load()?),
        Command::DescribeModel(args) => {
            let cfg = args.load()?;
            print!("{}", describe(&cfg.network_config()?));
            Ok(())
        }
        Command::Render(args) => cmd_render(&args.load()?),
    }
}

fn cmd_synth(cfg: &ExperimentConfig) -> Result<()> {
    let dataset = gen_dataset(
        cfg.seed,
        cfg.stacks,
        cfg.train_stacks,
        cfg.seq_len,
        cfg.size,
        cfg.difficulty,
    )?;
    dataset.save(&cfg.dataset)?;
    println!(
        "wrote {} stacks of {} {}x{} slices ({} train / {} test, preset {}) to {}",
        cfg.stacks,
        cfg.seq_len,
        cfg.size,
        cfg.size,
        cfg.train_stacks,
        cfg.stacks - cfg.train_stacks,
        cfg.difficulty.name(),
        cfg.dataset.display()
    );
    Ok(())
}

fn cmd_train(cfg: &ExperimentConfig) -> Result<()> {
    let report = train::<f32>(cfg)?;
    println!(
        "trained {} for {} iterations; final test dice per class:",
        cfg.model.as_str(),
        report.iterations
    );
    for (c, class) in Class::ALL.iter().enumerate() {
        println!("  {:<12} {:.3}", class.name(), report.final_test_dice[c]);
    }
    println!("checkpoint: {}", report.checkpoint_path.display());
    println!("metrics:    {}", report.metrics_path.display());
    Ok(())
}

fn cmd_eval(cfg: &ExperimentConfig, split: &str) -> Result<()> {
    let split: Split = split.parse()?;
    let ckpt = cfg
        .checkpoint
        .clone()
        .ok_or_else(|| Error::Config("eval needs `checkpoint = <path>`".into()))?;
    let dataset = Dataset::load(&cfg.dataset)?;
    let net = restore_network::<f32>(cfg, &ckpt)?;
    let report = evaluate(&net, &dataset, split)?;
    print!("{}", report.table(cfg.model.as_str()));
    for &c in &report.degenerate_classes {
        eprintln!(
            "warning: class {} is empty on every {} stack; dice follows the empty-vs-empty convention",
            Class::ALL[c].name(),
            split.name()
        );
    }
    std::fs::create_dir_all(&cfg.out_dir)?;
    let csv_path = cfg.out_dir.join(format!("eval-{}.csv", split.name()));
    let mut csv = String::from("stack,class,dice\n");
    for (stack, dice) in &report.rows {
        for (c, class) in Class::ALL.iter().enumerate() {
            csv.push_str(&format!("{},{},{}\n", stack, class.name(), dice[c]));
        }
    }
    std::fs::write(&csv_path, csv)?;
    println!("per-stack rows: {}", csv_path.display());
    Ok(())
}

fn cmd_kernel_study(cfg: &ExperimentConfig) -> Result<()> {
    let params = HollowObjectParams {
        family: if (cfg.study_semi_axes.0 - cfg.study_semi_axes.1).abs() < f64::EPSILON {
            ShapeFamily::Ring
        } else {
            ShapeFamily::Ellipse
        },
        semi_axes: cfg.study_semi_axes,
        wall_width: cfg.study_wall_width,
        noise_sigma: cfg.study_noise_sigma,
        ..Default::default()
    };
    let object = gen_hollow_object(&params, 100, cfg.seed)?;
    let result = kernel_scale_study(&object, &cfg.study_kernel_sizes)?;

    println!("{:<10}{:>14}", "kernel", "sharpness");
    for entry in &result.entries {
        println!("{:<10}{:>14.4}", entry.kernel_size, entry.score);
    }
    println!("argmax: {}", result.argmax_kernel());

    std::fs::create_dir_all(cfg.out_dir.join("panels"))?;
    let mut tiles = vec![pnm::to_gray8(&object.image)];
    tiles.extend(result.entries.iter().map(|e| pnm::to_gray8(&e.output)));
    let (w, h, mosaic) = pnm::tile_mosaic(&tiles, object.size, object.size, tiles.len());
    let panel = cfg.out_dir.join("panels").join("kernel-study.pgm");
    pnm::write_pgm(&panel, w, h, &mosaic)?;
    println!("panel: {}", panel.display());

    let mut csv = String::from("kernel,score\n");
    for e in &result.entries {
        csv.push_str(&format!("{},{}\n", e.kernel_size, e.score));
    }
    std::fs::write(cfg.out_dir.join("kernel-study.csv"), csv)?;
    Ok(())
}

fn cmd_export_kernels(cfg: &ExperimentConfig) -> Result<()> {
    let net = match &cfg.checkpoint {
        Some(ckpt) => restore_network::<f32>(cfg, ckpt)?,
        None => {
            let dataset = Dataset::load(&cfg.dataset).ok();
            let masks = prepare_masks::<f32>(cfg, dataset.as_ref())?;
            build_network::<f32>(&cfg.network_config()?, &masks, cfg.seed)?
        }
    };
    let out = cfg.out_dir.join("kernels");
    std::fs::create_dir_all(&out)?;
    let banks = net.kernel_banks();
    if banks.is_empty() {
        println!("model {} has no hollow kernel banks", cfg.model.as_str());
    }
    for bank in banks {
        let shape = bank.weights.shape().to_vec();
        let (cout, cin, k) = (shape[0], shape[1], shape[2]);
        let kk = k * k;
        let tiles: Vec<Vec<u8>> = (0..cout * cin)
            .map(|s| {
                let slice = &bank.weights.data()[s * kk..(s + 1) * kk];
                pnm::to_gray8(&Tensor::from_vec(vec![k, k], slice.to_vec()).unwrap())
            })
            .collect();
        let columns = (cout * cin).min(16);
        let (w, h, mosaic) = pnm::tile_mosaic(&tiles, k, k, columns);
        let safe = bank.layer.replace('/', "_");
        let path = out.join(format!("{}.pgm", safe));
        pnm::write_pgm(&path, w, h, &mosaic)?;
        println!("{} ({}x{} kernels of {}x{}): {}", bank.layer, cout, cin, k, k, path.display());
    }

    // kernel-generating models: export the kernels predicted for the first
    // test image
    if cfg.model.is_generated() {
        if let Ok(dataset) = Dataset::load(&cfg.dataset) {
            let stack = dataset.stack_ids(Split::Test)[0];
            let (images, _) = dataset.stack_batch::<f32>(stack);
            let first = images.reshaped(vec![dataset.meta.seq_len, 1, dataset.meta.size, dataset.meta.size])?;
            let tape = Tape::new();
            let fwd = net.forward_spatial(&tape, &first, false)?;
            if let Some(kernels) = fwd.tiny_kernels {
                let ks = tape.shape(kernels);
                let (maps, k) = (ks[1], ks[2]);
                let value = tape.value(kernels);
                let tiles: Vec<Vec<u8>> = (0..maps)
                    .map(|m| {
                        let slice = &value.data()[m * k * k..(m + 1) * k * k];
                        pnm::to_gray8(&Tensor::from_vec(vec![k, k], slice.to_vec()).unwrap())
                    })
                    .collect();
                let (w, h, mosaic) = pnm::tile_mosaic(&tiles, k, k, 8);
                let path = out.join("generated-slice0.pgm");
                pnm::write_pgm(&path, w, h, &mosaic)?;
                println!("generated kernels for test stack {} slice 0: {}", stack, path.display());
            }
        }
    }
    Ok(())
}

/// Class color code: green inner wall, yellow outer wall, red tumor.
fn colorize(masks: [&[u8]; 3], n: usize) -> Vec<u8> {
    let mut rgb = vec![0u8; 3 * n];
    for i in 0..n {
        let (mut r, mut g, mut b) = (0u8, 0u8, 0u8);
        if masks[0][i] > 0 {
            (r, g, b) = (0, 200, 60); // inner wall: green
        }
        if masks[1][i] > 0 {
            (r, g, b) = (230, 210, 0); // outer wall: yellow
        }
        if masks[2][i] > 0 {
            (r, g, b) = (220, 30, 30); // tumor: red
        }
        rgb[3 * i] = r;
        rgb[3 * i + 1] = g;
        rgb[3 * i + 2] = b;
    }
    rgb
}

fn cmd_render(cfg: &ExperimentConfig) -> Result<()> {
    let ckpt = cfg
        .checkpoint
        .clone()
        .ok_or_else(|| Error::Config("render needs `checkpoint = <path>`".into()))?;
    let dataset = Dataset::load(&cfg.dataset)?;
    let net = restore_network::<f32>(cfg, &ckpt)?;
    let stack = cfg.render_stack;
    if stack >= dataset.meta.stacks {
        return Err(Error::Config(format!(
            "render_stack {} out of range ({} stacks)",
            stack, dataset.meta.stacks
        )));
    }
    let (images, _) = dataset.stack_batch::<f32>(stack);
    let tape = Tape::new();
    let out = if cfg.stack_mode() {
        net.forward_stack(&tape, &images, false)?
    } else {
        net.forward_spatial(&tape, &images, false)?
    };
    let pred = tape.value(out.pred);
    let n = dataset.meta.size;
    let hw = n * n;
    let dir = cfg.out_dir.join("panels");
    std::fs::create_dir_all(&dir)?;
    for t in 0..dataset.meta.seq_len {
        let gray = pnm::to_gray8(&dataset.raw_image(stack, t));
        let gt = colorize(
            [
                dataset.mask_plane(stack, t, 0),
                dataset.mask_plane(stack, t, 1),
                dataset.mask_plane(stack, t, 2),
            ],
            hw,
        );
        let pred_planes: Vec<Vec<u8>> = (0..3)
            .map(|c| {
                let base = (t * 3 + c) * hw;
                pred.data()[base..base + hw].iter().map(|&v| (v >= 0.5) as u8).collect()
            })
            .collect();
        let pr = colorize([&pred_planes[0], &pred_planes[1], &pred_planes[2]], hw);
        // panel: image | ground truth | prediction
        let mut rgb = vec![0u8; 3 * n * 3 * n / 1 * 1];
        let width = 3 * n;
        rgb.resize(3 * width * n, 0);
        for y in 0..n {
            for x in 0..n {
                let g = gray[y * n + x];
                let at = 3 * (y * width + x);
                rgb[at] = g;
                rgb[at + 1] = g;
                rgb[at + 2] = g;
                let at = 3 * (y * width + n + x);
                rgb[at..at + 3].copy_from_slice(&gt[3 * (y * n + x)..3 * (y * n + x) + 3]);
                let at = 3 * (y * width + 2 * n + x);
                rgb[at..at + 3].copy_from_slice(&pr[3 * (y * n + x)..3 * (y * n + x) + 3]);
            }
        }
        let path = dir.join(format!("stack{}-slice{:02}.ppm", stack, t));
        pnm::write_ppm(&path, width, n, &rgb)?;
    }
    println!("wrote {} panels to {}", dataset.meta.seq_len, dir.display());
    Ok(())
}
