//! Subcommand implementations.

use std::path::{Path, PathBuf};

use actnet_core::activation_net::{
    curves_to_csv, dump_activation_shapes, ANConfig, ActivationCurve, SiteSelection,
};
use actnet_core::data::{self, DatasetHandle};
use actnet_core::gradcheck::GradCheckConfig;
use actnet_core::models::{
    gradient_check_spec, preset, ActivationMode, LossKind, Model, ModelSpec,
};
use actnet_core::train::{train, TrainConfig};
use actnet_core::{Error, Result};

use crate::snapshot;
use crate::{DataArgs, ModelArgs, TrainFlags, EXIT_DIVERGED, EXIT_GRADCHECK, EXIT_OK};

fn an_config(args: &ModelArgs) -> Result<ANConfig> {
    use actnet_core::activation_net::{AnInit, AnMode};
    let mode = match args.an_mode.as_str() {
        "full" => AnMode::Full,
        "shared" => AnMode::Shared,
        other => return Err(Error::Config(format!("unknown an mode {other:?}"))),
    };
    let init = match args.an_init.as_str() {
        "identity" => AnInit::Identity,
        "zero_v_tanh" => AnInit::ZeroVTanh,
        "tanh_taylor" => AnInit::TanhTaylor,
        other => return Err(Error::Config(format!("unknown an init {other:?}"))),
    };
    let u_clip = if args.an_clip == "none" {
        None
    } else {
        Some(
            args.an_clip
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("bad an_clip {:?}", args.an_clip)))?,
        )
    };
    let cfg = ANConfig { order: args.an_order, mode, kernel: args.an_kernel, u_clip, init };
    cfg.validate()?;
    Ok(cfg)
}

fn parse_variant(s: &str) -> Result<ActivationMode> {
    let v: ActivationMode = s.parse()?;
    if v == ActivationMode::None {
        return Err(Error::Config(
            "variant must be one of relu, poly_fixed, inhibition, attention, activation_net".into(),
        ));
    }
    Ok(v)
}

fn resolve_spec(args: &ModelArgs, input_shape: &[usize]) -> Result<ModelSpec> {
    if let Some(path) = &args.model_file {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let spec = ModelSpec::parse(&text)?;
        spec.validate()?;
        return Ok(spec);
    }
    let name = args
        .preset
        .as_deref()
        .ok_or_else(|| Error::Config("either --model-file or --preset is required".into()))?;
    let variant = parse_variant(&args.variant)?;
    let spec = preset(name, variant, input_shape, an_config(args)?)?;
    spec.validate()?;
    Ok(spec)
}

fn data_dir(args: &DataArgs) -> Result<PathBuf> {
    if let Some(d) = &args.data_dir {
        return Ok(d.clone());
    }
    if let Ok(d) = std::env::var("ACTNET_DATA_DIR") {
        return Ok(PathBuf::from(d));
    }
    Err(Error::Config(
        "no --data-dir given and ACTNET_DATA_DIR is unset".into(),
    ))
}

fn load_splits(args: &DataArgs) -> Result<(DatasetHandle<f32>, DatasetHandle<f32>)> {
    let dir = data_dir(args)?;
    match args.dataset.as_str() {
        "mnist" => data::load_mnist_dir(&dir),
        "cifar10" => data::load_cifar10_dir(&dir),
        other => Err(Error::Config(format!(
            "unknown dataset {other:?} (expected mnist or cifar10)"
        ))),
    }
}

/// Load, optionally corrupt for denoising, and subset the two splits.
fn prepare_data(
    args: &DataArgs,
    loss: LossKind,
    seed: u64,
) -> Result<(DatasetHandle<f32>, DatasetHandle<f32>)> {
    let (mut train_h, mut test_h) = load_splits(args)?;
    if loss == LossKind::Mse {
        train_h = data::corrupt_gaussian(&train_h, args.noise_var, seed ^ 0x6e01, true)?;
        test_h = data::corrupt_gaussian(&test_h, args.noise_var, seed ^ 0x6e02, true)?;
    }
    if args.train_count > 0 {
        train_h = data::subset(&train_h, args.train_count, seed)?;
    }
    if args.test_count > 0 {
        test_h = data::subset(&test_h, args.test_count, seed)?;
    }
    Ok((train_h, test_h))
}

fn dataset_input_shape(args: &DataArgs) -> Result<Vec<usize>> {
    Ok(match args.dataset.as_str() {
        "mnist" => vec![1, 28, 28],
        "cifar10" => vec![3, 32, 32],
        other => return Err(Error::Config(format!("unknown dataset {other:?}"))),
    })
}

fn train_config(flags: &TrainFlags) -> TrainConfig {
    TrainConfig {
        lr: flags.lr,
        momentum: flags.momentum,
        epochs: flags.epochs,
        batch_size: flags.batch,
        seed: flags.seed,
        val_fraction: 0.1,
        parallel: !flags.serial,
    }
}

fn write(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents)
        .map_err(|e| Error::Data(format!("cannot write {}: {e}", path.display())))
}

struct RunOutput {
    record: actnet_core::train::RunRecord,
    params: usize,
}

fn run_one(
    spec: &ModelSpec,
    data_args: &DataArgs,
    flags: &TrainFlags,
    out: &Path,
) -> Result<RunOutput> {
    std::fs::create_dir_all(out)
        .map_err(|e| Error::Data(format!("cannot create {}: {e}", out.display())))?;
    let (train_h, test_h) = prepare_data(data_args, spec.loss, flags.seed)?;
    if train_h.image_shape() != spec.input_shape {
        return Err(Error::Config(format!(
            "model expects input {:?} but dataset provides {:?}",
            spec.input_shape,
            train_h.image_shape()
        )));
    }
    let mut model: Model<f32> = Model::build(spec, flags.seed)?;
    let params = model.parameter_count();
    let mut record = train(&mut model, &train_h, Some(&test_h), &train_config(flags))?;
    record.dataset = data_args.dataset.clone();
    if data_args.train_count > 0 || data_args.test_count > 0 {
        record.subset_seed = Some(flags.seed);
    }
    write(&out.join("run.json"), &record.to_json())?;
    write(&out.join("losses.csv"), &record.losses_csv())?;
    snapshot::save_model(&model, flags.seed, &out.join("model.json"))?;
    Ok(RunOutput { record, params })
}

pub fn cmd_train(
    model_args: &ModelArgs,
    data_args: &DataArgs,
    flags: &TrainFlags,
    out: &Path,
) -> Result<u8> {
    let spec = resolve_spec(model_args, &dataset_input_shape(data_args)?)?;
    let run = run_one(&spec, data_args, flags, out)?;
    let r = &run.record;
    println!(
        "{}: {} params, final train loss {:.6}, val loss {:.6}, test metric {}",
        spec.name,
        run.params,
        r.final_train_loss(),
        r.final_val_loss(),
        r.final_test_metric.map(|m| format!("{m:.6}")).unwrap_or_else(|| "n/a".into()),
    );
    if r.diverged {
        eprintln!("training diverged; partial record written to {}", out.display());
        return Ok(EXIT_DIVERGED);
    }
    Ok(EXIT_OK)
}

pub fn cmd_compare(
    model_args: &ModelArgs,
    data_args: &DataArgs,
    flags: &TrainFlags,
    out: &Path,
) -> Result<u8> {
    let preset_name = model_args
        .preset
        .as_deref()
        .ok_or_else(|| Error::Config("compare requires --preset".into()))?;
    std::fs::create_dir_all(out)
        .map_err(|e| Error::Data(format!("cannot create {}: {e}", out.display())))?;
    let input_shape = dataset_input_shape(data_args)?;
    let an = an_config(model_args)?;
    let mut rows = Vec::new();
    let mut baseline_params: Option<usize> = None;
    for variant in ActivationMode::variants() {
        let spec = preset(preset_name, variant, &input_shape, an)?;
        let sub = out.join(variant.as_str());
        let result = run_one(&spec, data_args, flags, &sub);
        let row = match result {
            Ok(run) => {
                if variant == ActivationMode::Relu {
                    baseline_params = Some(run.params);
                }
                let ratio = baseline_params
                    .map(|b| 100.0 * run.params as f64 / b as f64)
                    .unwrap_or(f64::NAN);
                let r = &run.record;
                format!(
                    "{},{},{:.1},{},{},{}",
                    variant.as_str(),
                    run.params,
                    ratio,
                    r.final_train_loss(),
                    r.final_val_loss(),
                    r.final_test_metric.unwrap_or(f64::NAN),
                )
            }
            Err(e) => {
                eprintln!("variant {} failed: {e}", variant.as_str());
                format!("{},nan,nan,nan,nan,nan", variant.as_str())
            }
        };
        rows.push(row);
    }
    let mut csv =
        String::from("variant,params,param_ratio,final_train_loss,final_val_loss,test_metric\n");
    for row in &rows {
        csv.push_str(row);
        csv.push('\n');
    }
    write(&out.join("compare.csv"), &csv)?;
    println!("{csv}");
    Ok(EXIT_OK)
}

pub fn cmd_gradcheck(
    model_args: &ModelArgs,
    input_shape: Option<&str>,
    seed: u64,
    samples: usize,
    threshold: f64,
    out: Option<&Path>,
) -> Result<u8> {
    let shape = match input_shape {
        Some(s) => parse_shape(s)?,
        None => vec![1, 28, 28],
    };
    let spec = resolve_spec(model_args, &shape)?;
    let cfg = GradCheckConfig { epsilon: 1e-5, samples_per_param: samples, seed, threshold };
    let report = gradient_check_spec(&spec, seed, &cfg)?;
    let json = report.to_json();
    match out {
        Some(path) => write(path, &json)?,
        None => println!("{json}"),
    }
    for p in &report.params {
        let mut notes = String::new();
        if p.below_resolution > 0 {
            notes.push_str(&format!(" ({} below fd resolution)", p.below_resolution));
        }
        if p.nonsmooth_skipped > 0 {
            notes.push_str(&format!(" ({} kink-crossing skipped)", p.nonsmooth_skipped));
        }
        if p.failed_coords > 0 {
            notes.push_str(&format!(" ({} failed)", p.failed_coords));
        }
        println!(
            "{}: max_rel_err {:.3e} over {} coords{notes}",
            p.name, p.max_rel_err, p.coords_checked
        );
    }
    println!(
        "gradcheck {}: max_rel_err {:.3e} (threshold {:.1e})",
        if report.pass { "PASS" } else { "FAIL" },
        report.max_rel_err,
        report.threshold
    );
    Ok(if report.pass { EXIT_OK } else { EXIT_GRADCHECK })
}

fn parse_shape(s: &str) -> Result<Vec<usize>> {
    s.split('x')
        .map(|d| d.parse::<usize>().map_err(|_| Error::Config(format!("bad shape {s:?}"))))
        .collect()
}

fn parse_grid(s: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = s.split(':').collect();
    if parts.len() != 3 {
        return Err(Error::Config(format!("grid must be lo:hi:n, got {s:?}")));
    }
    let lo: f64 = parts[0].parse().map_err(|_| Error::Config(format!("bad grid lo {s:?}")))?;
    let hi: f64 = parts[1].parse().map_err(|_| Error::Config(format!("bad grid hi {s:?}")))?;
    let n: usize = parts[2].parse().map_err(|_| Error::Config(format!("bad grid n {s:?}")))?;
    if n < 2 || !(hi > lo) {
        return Err(Error::Config(format!("grid needs hi > lo and n >= 2, got {s:?}")));
    }
    Ok((0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect())
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_dump_activations(
    snapshot_path: &Path,
    data_args: &DataArgs,
    input_index: usize,
    layer: Option<&str>,
    node: Option<usize>,
    pixel: Option<&str>,
    grid: &str,
    out: &Path,
) -> Result<u8> {
    let grid = parse_grid(grid)?;
    let (model, _seed) = snapshot::load_model::<f32>(snapshot_path)?;
    let (_, test_h) = prepare_data(data_args, model.spec.loss, 0)?;
    if input_index >= test_h.len() {
        return Err(Error::Data(format!(
            "input index {input_index} out of range ({} test images)",
            test_h.len()
        )));
    }
    let input = test_h.image(input_index);
    let mut tape = actnet_core::autograd::Tape::new();
    let (_, traces) = model.forward_traced(&mut tape, &input)?;
    if traces.is_empty() {
        return Err(Error::Config(
            "model has no activation-net layers to dump".into(),
        ));
    }
    let mut curves: Vec<ActivationCurve> = Vec::new();
    let mut matched = false;
    for trace in &traces {
        if let Some(want) = layer {
            if trace.layer != want {
                continue;
            }
        }
        matched = true;
        let spatial = trace.coeffs.shape().len() == 3;
        let selection = if spatial {
            let (h, w) = (trace.coeffs.shape()[1], trace.coeffs.shape()[2]);
            let (row, col) = match pixel {
                Some(p) => {
                    let (r, c) = p
                        .split_once(',')
                        .ok_or_else(|| Error::Config(format!("bad pixel {p:?}")))?;
                    (
                        r.trim().parse().map_err(|_| Error::Config(format!("bad pixel {p:?}")))?,
                        c.trim().parse().map_err(|_| Error::Config(format!("bad pixel {p:?}")))?,
                    )
                }
                None => (h / 2, w / 2),
            };
            match node {
                Some(ch) => SiteSelection::ConvPixel { channel: ch, row, col },
                None => SiteSelection::AllChannelsAt { row, col },
            }
        } else {
            match node {
                Some(n) => SiteSelection::DenseNode(n),
                None => SiteSelection::AllDenseNodes,
            }
        };
        curves.extend(dump_activation_shapes(
            &trace.layer,
            &trace.coeffs,
            trace.channels,
            selection,
            &grid,
        )?);
    }
    if !matched {
        let names: Vec<String> = traces.iter().map(|t| t.layer.clone()).collect();
        return Err(Error::Config(format!(
            "layer {layer:?} has no activation net (available: {names:?})"
        )));
    }
    write(out, &curves_to_csv(&curves))?;
    println!("wrote {} curves to {}", curves.len(), out.display());
    Ok(EXIT_OK)
}

pub fn cmd_gen_data(out: &Path, train_count: usize, test_count: usize, seed: u64) -> Result<u8> {
    data::synth::write_corpus(out, train_count, test_count, seed)?;
    println!(
        "wrote {train_count} train / {test_count} test synthetic digits to {}",
        out.display()
    );
    Ok(EXIT_OK)
}

pub fn cmd_presets(order: usize) -> Result<u8> {
    use actnet_core::activations::{taylor_preset, TaylorPreset};
    let sigmoid = taylor_preset::<f64>(TaylorPreset::Sigmoid, order)?;
    let tanh = taylor_preset::<f64>(TaylorPreset::Tanh, order)?;
    let json = serde_json::json!({
        "order": order,
        "sigmoid": sigmoid.coeffs_f64(),
        "tanh": tanh.coeffs_f64(),
    });
    println!("{}", serde_json::to_string_pretty(&json).expect("presets serialize"));
    Ok(EXIT_OK)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_parsing() {
        let g = parse_grid("-1:1:5").unwrap();
        assert_eq!(g, vec![-1.0, -0.5, 0.0, 0.5, 1.0]);
        assert!(parse_grid("1:0:5").is_err());
        assert!(parse_grid("0:1:1").is_err());
        assert!(parse_grid("junk").is_err());
    }

    #[test]
    fn variant_parsing_rejects_none() {
        assert!(parse_variant("none").is_err());
        assert!(parse_variant("activation_net").is_ok());
    }
}
