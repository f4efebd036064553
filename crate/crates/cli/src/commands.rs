use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use spikeconv::convert::{normalize_weights_with, BiasRule, ConvertedModel};
use spikeconv::energy::{compare_outputs, Comparison, EnergyConstants, EnergyReport};
use spikeconv::graph::{fold_batchnorm, sample_activation_stats, ModelFile, ModelGraph};
use spikeconv::snn::{build_snn, run_snn, CodingConfig, DecodedOutput, StageTelemetry};
use spikeconv::Tensor;

use crate::args::{require, ConvertArgs, GenFixtureArgs, GridPoint, ReportArgs, RunArgs, SweepArgs};
use crate::fixture::{builtin, Fixture};
use crate::{tensorset, Invalid};

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn out_dir(out: Option<PathBuf>) -> Result<PathBuf> {
    let dir = require(out, "out")?;
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

pub fn cmd_gen_fixture(args: GenFixtureArgs) -> Result<Fixture> {
    let args = args.merged()?;
    let mut spec = builtin(&require(args.fixture, "fixture")?)?;
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    let dir = out_dir(args.out)?;
    let fixture = spec.generate()?;
    fixture.write(&dir)?;
    println!(
        "{}: {} layers, {} samples -> {}",
        spec.name,
        fixture.graph.layers().len(),
        fixture.samples.len(),
        dir.display()
    );
    Ok(fixture)
}

/// Fold batch norm, sample channel maxima on the folded graph and normalize.
pub fn convert(graph: &ModelGraph, samples: &[Tensor], rule: BiasRule) -> Result<ConvertedModel> {
    let folded = fold_batchnorm(graph)?;
    let stats = sample_activation_stats(&folded, samples)?;
    Ok(normalize_weights_with(&folded, &stats, rule)?)
}

pub fn cmd_convert(args: ConvertArgs) -> Result<ConvertedModel> {
    let args = args.merged()?;
    let model_path = require(args.model, "model")?;
    let samples_path = require(args.samples, "samples")?;
    let dir = out_dir(args.out)?;
    let file = ModelFile::read(&model_path).with_context(|| format!("loading {}", model_path.display()))?;
    if file.conversion.is_some() {
        bail!(Invalid(format!("{} is already converted", model_path.display())));
    }
    let samples = tensorset::read(&samples_path)?;
    let model = convert(&file.graph, &samples, args.bias_rule.unwrap_or_default())?;
    model.to_file().write(&dir.join("converted.json"))?;
    fs::write(dir.join("stats.json"), model.stats().to_json()?)?;
    println!(
        "converted {} layers with {} samples -> {}",
        model.graph().layers().len(),
        samples.len(),
        dir.display()
    );
    Ok(model)
}

/// Everything one simulation produces.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub decoded: DecodedOutput,
    pub comparison: BTreeMap<String, Comparison>,
    pub energy: EnergyReport,
    pub wall_ms: f64,
}

impl RunResult {
    /// Worst max-abs error over all outputs.
    pub fn max_abs(&self) -> f64 {
        self.comparison.values().map(|c| c.max_abs).fold(0.0, f64::max)
    }

    pub fn mse(&self) -> f64 {
        let n = self.comparison.len().max(1) as f64;
        self.comparison.values().map(|c| c.mse).sum::<f64>() / n
    }

    pub fn argmax_agree(&self) -> bool {
        self.comparison.values().all(|c| c.argmax_agree)
    }
}

/// Run the spiking model and compare it with the channel-normalized ANN.
pub fn simulate(model: &ConvertedModel, input: &Tensor, coding: CodingConfig) -> Result<RunResult> {
    simulate_with(model, input, coding, EnergyConstants::default())
}

pub fn simulate_with(
    model: &ConvertedModel,
    input: &Tensor,
    coding: CodingConfig,
    constants: EnergyConstants,
) -> Result<RunResult> {
    let start = Instant::now();
    let plan = build_snn(model, coding)?;
    let decoded = run_snn(&plan, input)?;
    let wall_ms = start.elapsed().as_secs_f64() * 1e3;
    let ann = model.normalized_forward(input)?;
    let comparison = decoded
        .outputs
        .iter()
        .map(|(id, snn)| Ok((id.clone(), compare_outputs(&ann[id], snn)?)))
        .collect::<Result<BTreeMap<_, _>>>()?;
    let energy = EnergyReport::new(model.graph(), &decoded.telemetry, constants);
    Ok(RunResult {
        decoded,
        comparison,
        energy,
        wall_ms,
    })
}

#[derive(Serialize)]
struct TelemetryRecord<'a> {
    coding: &'a CodingConfig,
    input_pixels: u64,
    total_spikes: u64,
    wall_ms: f64,
    stages: &'a [StageTelemetry],
    outputs: &'a BTreeMap<String, Tensor<f64>>,
}

const RUN_FIELDS: [&str; 7] = [
    "timesteps",
    "compression",
    "scheme",
    "max_abs",
    "mse",
    "argmax_agree",
    "total_spikes",
];

fn run_fields(coding: &CodingConfig, r: &RunResult) -> Vec<String> {
    vec![
        coding.timesteps.to_string(),
        coding.compression.to_string(),
        coding.scheme.to_string(),
        format!("{:e}", r.max_abs()),
        format!("{:e}", r.mse()),
        r.argmax_agree().to_string(),
        r.decoded.telemetry.total_spikes().to_string(),
    ]
}

pub fn cmd_run(args: RunArgs) -> Result<RunResult> {
    let args = args.merged()?;
    let coding = args.coding()?;
    let model_path = require(args.model.clone(), "model")?;
    let input_path = require(args.input.clone(), "input")?;
    let dir = out_dir(args.out.clone())?;
    let file = ModelFile::read(&model_path).with_context(|| format!("loading {}", model_path.display()))?;
    let model = ConvertedModel::from_file(&file)?;
    let inputs = tensorset::read(&input_path)?;
    let index = args.index.unwrap_or(0);
    let Some(input) = inputs.get(index) else {
        bail!(Invalid(format!(
            "{} holds {} tensors, no index {index}",
            input_path.display(),
            inputs.len()
        )));
    };
    let result = simulate_with(&model, input, coding, args.energy.unwrap_or_default())?;
    let t = &result.decoded.telemetry;
    write_json(
        &dir.join("telemetry.json"),
        &TelemetryRecord {
            coding: &coding,
            input_pixels: t.input_pixels,
            total_spikes: t.total_spikes(),
            wall_ms: result.wall_ms,
            stages: &t.stages,
            outputs: &result.decoded.outputs,
        },
    )?;
    write_json(&dir.join("comparison.json"), &result.comparison)?;
    write_json(&dir.join("energy.json"), &result.energy)?;
    let mut csv = csv::Writer::from_path(dir.join("energy.csv"))?;
    let mut header: Vec<&str> = vec!["model"];
    header.extend(RUN_FIELDS);
    header.extend(EnergyReport::CSV_HEADER);
    csv.write_record(&header)?;
    let mut row = vec![model_path.display().to_string()];
    row.extend(run_fields(&coding, &result));
    row.extend(result.energy.csv_fields());
    csv.write_record(&row)?;
    csv.flush()?;
    println!(
        "{} T={} f_c={}: max_abs={:.6} spikes={} energy_snn={:.3e} J energy_ann={:.3e} J",
        coding.scheme,
        coding.timesteps,
        coding.compression,
        result.max_abs(),
        t.total_spikes(),
        result.energy.energy_snn_joules,
        result.energy.energy_ann_joules
    );
    Ok(result)
}

/// A fixture and the grid to run it on.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepConfig {
    pub fixture: String,
    pub seed: Option<u64>,
    pub grid: Vec<GridPoint>,
    pub out: PathBuf,
}

#[derive(Debug, Clone)]
pub struct SweepRow {
    pub point: GridPoint,
    pub result: std::result::Result<RunResult, String>,
}

pub const SWEEP_FILE: &str = "sweep.csv";

fn sweep_header() -> Vec<&'static str> {
    let mut h = vec!["fixture"];
    h.extend(RUN_FIELDS);
    h.extend(EnergyReport::CSV_HEADER);
    h.extend(["status", "error", "wall_ms"]);
    h
}

pub fn sweep(cfg: &SweepConfig) -> Result<Vec<SweepRow>> {
    let mut spec = builtin(&cfg.fixture)?;
    if let Some(seed) = cfg.seed {
        spec.seed = seed;
    }
    let fixture = spec.generate()?;
    let model = convert(&fixture.graph, &fixture.samples, BiasRule::Derived)?;
    let rows: Vec<SweepRow> = cfg
        .grid
        .par_iter()
        .map(|&point| {
            let result = CodingConfig::new(point.scheme, point.timesteps, point.compression)
                .map_err(anyhow::Error::from)
                .and_then(|c| simulate(&model, &fixture.eval, c))
                .map_err(|e| format!("{e:#}"));
            SweepRow { point, result }
        })
        .collect();
    fs::create_dir_all(&cfg.out).with_context(|| format!("creating {}", cfg.out.display()))?;
    let mut csv = csv::Writer::from_path(cfg.out.join(SWEEP_FILE))?;
    csv.write_record(sweep_header())?;
    for row in &rows {
        let p = row.point;
        let mut rec = vec![spec.name.clone()];
        match &row.result {
            Ok(r) => {
                let coding = CodingConfig::new(p.scheme, p.timesteps, p.compression)?;
                rec.extend(run_fields(&coding, r));
                rec.extend(r.energy.csv_fields());
                rec.extend(["ok".to_string(), String::new(), format!("{:.3}", r.wall_ms)]);
            }
            Err(e) => {
                rec.extend([p.timesteps.to_string(), p.compression.to_string(), p.scheme.to_string()]);
                rec.extend(std::iter::repeat_n(
                    String::new(),
                    RUN_FIELDS.len() - 3 + EnergyReport::CSV_HEADER.len(),
                ));
                rec.extend(["failed".to_string(), e.clone(), String::new()]);
            }
        }
        csv.write_record(&rec)?;
    }
    csv.flush()?;
    Ok(rows)
}

pub fn cmd_sweep(args: SweepArgs) -> Result<Vec<SweepRow>> {
    let args = args.merged()?;
    let cfg = SweepConfig {
        fixture: require(args.fixture, "fixture")?,
        seed: args.seed,
        grid: args.grid.unwrap_or_default(),
        out: out_dir(args.out)?,
    };
    let rows = sweep(&cfg)?;
    let failed = rows.iter().filter(|r| r.result.is_err()).count();
    println!(
        "{}: {} rows, {failed} failed -> {}",
        cfg.fixture,
        rows.len(),
        cfg.out.join(SWEEP_FILE).display()
    );
    if failed > 0 {
        bail!("{failed} of {} sweep rows failed", rows.len());
    }
    Ok(rows)
}

fn markdown_table(header: &[String], rows: &[Vec<String>]) -> String {
    let mut s = format!("| {} |\n|{}\n", header.join(" | "), "---|".repeat(header.len()));
    for r in rows {
        s.push_str(&format!("| {} |\n", r.join(" | ")));
    }
    s
}

/// Markdown summary of a `run` or `sweep` output directory.
pub fn report(input: &Path) -> Result<String> {
    let sweep_csv = input.join(SWEEP_FILE);
    if sweep_csv.exists() {
        let mut r = csv::Reader::from_path(&sweep_csv)?;
        let header: Vec<String> = r.headers()?.iter().map(String::from).collect();
        let rows = r
            .records()
            .map(|rec| Ok(rec?.iter().map(String::from).collect()))
            .collect::<Result<Vec<Vec<String>>>>()?;
        return Ok(format!("# Sweep\n\n{}", markdown_table(&header, &rows)));
    }
    let energy: EnergyReport = serde_json::from_str(
        &fs::read_to_string(input.join("energy.json"))
            .with_context(|| format!("{} holds neither {SWEEP_FILE} nor energy.json", input.display()))?,
    )?;
    let comparison: BTreeMap<String, Comparison> =
        serde_json::from_str(&fs::read_to_string(input.join("comparison.json"))?)?;
    let mut s = String::from("# Run\n\n## Outputs\n\n");
    let header: Vec<String> = ["output", "max_abs", "mse", "argmax_agree"].map(String::from).to_vec();
    let rows: Vec<Vec<String>> = comparison
        .iter()
        .map(|(id, c)| {
            vec![
                id.clone(),
                format!("{:.6}", c.max_abs),
                format!("{:.3e}", c.mse),
                c.argmax_agree.to_string(),
            ]
        })
        .collect();
    s.push_str(&markdown_table(&header, &rows));
    s.push_str("\n## Operations\n\n");
    let header: Vec<String> = ["layer", "kind", "ann_macs", "snn_acs", "fanout_acs"]
        .map(String::from)
        .to_vec();
    let mut rows: Vec<Vec<String>> = energy
        .layers
        .iter()
        .map(|l| {
            vec![
                l.id.clone(),
                l.kind.clone(),
                l.ann_macs.to_string(),
                l.snn_acs.to_string(),
                l.fanout_acs.to_string(),
            ]
        })
        .collect();
    rows.push(vec![
        "total".into(),
        String::new(),
        energy.ann_mac_count.to_string(),
        energy.snn_ac_count.to_string(),
        energy.fanout_ac_count.to_string(),
    ]);
    s.push_str(&markdown_table(&header, &rows));
    s.push_str(&format!(
        "\ninput MACs: {}\n\nenergy: ANN {:.4e} J, SNN {:.4e} J\n",
        energy.input_mac_count, energy.energy_ann_joules, energy.energy_snn_joules
    ));
    Ok(s)
}

pub fn cmd_report(args: ReportArgs) -> Result<String> {
    let args = args.merged()?;
    let input = require(args.input, "input")?;
    let dir = out_dir(args.out)?;
    let text = report(&input)?;
    fs::write(dir.join("report.md"), &text)?;
    print!("{text}");
    Ok(text)
}
