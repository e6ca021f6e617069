use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

use relsparse::checks::{all_suites, TOLERANCE};
use relsparse::config::{ConfigError, Provenance, RunConfig};
use relsparse::corridor::{calibrate_dmin, label_dataset, FrameLabels};
use relsparse::dataset::SceneDataset;
use relsparse::harness::{self, HarnessError, CURVE_HEADER};
use relsparse::metrics::{evaluate, Detection, DetectionRecord, MetricsReport};
use relsparse::profiler::{large_schedule, pipeline_flops, sensitivity, stages_csv, PipelineShape};
use relsparse::sparsity::training::HeadStage;
use relsparse::sparsity::{ModelParams, PipelineOptions, RunMode, ScheduleConfig};
use relsparse::synthetic::gen_synthetic;

#[derive(Parser)]
#[command(name = "relsparse", version, about = "Corridor relevance labels, relevance-filtered metrics and token/query sparsity")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// TOML run config; defaults apply when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the data seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    mode: Option<RunMode>,
    #[arg(long, global = true)]
    tkr: Option<f64>,
    #[arg(long, global = true)]
    dmin: Option<f64>,
    #[arg(long = "ra-radius", global = true)]
    ra_radius: Option<f64>,
    #[arg(long, global = true)]
    dataset: Option<PathBuf>,
    #[arg(long, global = true)]
    labels: Option<PathBuf>,
    #[arg(long, global = true)]
    detections: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Shape {
    Toy,
    Large,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset.
    Gen,
    /// Choose d_min from the corridor-distance distribution.
    Calibrate,
    /// Corridor relevance labels as JSON Lines.
    Label,
    /// Metrics report for a detections file.
    Eval,
    /// Fit the toy model on a dataset and run it; detections and traces.
    Simulate,
    /// Analytic FLOP report.
    Profile {
        #[arg(long, value_enum, default_value = "large")]
        shape: Shape,
    },
    /// Finite-difference gradient suites.
    Gradcheck,
    /// Sweep keep ratios and report compute and accuracy.
    Curve,
}

#[derive(Debug)]
enum Failure {
    Config(String),
    Data(String),
    Check(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Data(_) => 3,
            Failure::Check(_) => 4,
        }
    }
    fn kind(&self) -> &'static str {
        match self {
            Failure::Config(_) => "config",
            Failure::Data(_) => "data",
            Failure::Check(_) => "check",
        }
    }
    fn message(&self) -> &str {
        match self {
            Failure::Config(m) | Failure::Data(m) | Failure::Check(m) => m,
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e.to_string())
    }
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        match e {
            HarnessError::Data(m) => Failure::Data(m),
            HarnessError::Check(m) => Failure::Check(m),
        }
    }
}

fn data<E: std::fmt::Display>(e: E) -> Failure {
    Failure::Data(e.to_string())
}

/// Output files written so far; removed if the command fails.
struct Outputs {
    dir: PathBuf,
    prov: Provenance,
    written: Vec<PathBuf>,
}

impl Outputs {
    fn path(&mut self, name: &str) -> Result<PathBuf, Failure> {
        fs::create_dir_all(&self.dir).map_err(data)?;
        let p = self.dir.join(name);
        self.written.push(p.clone());
        Ok(p)
    }

    /// JSON object with the provenance stamp merged in.
    fn json<T: Serialize>(&mut self, name: &str, body: &T) -> Result<(), Failure> {
        let v = stamp(&self.prov, body)?;
        let p = self.path(name)?;
        fs::write(&p, serde_json::to_string_pretty(&v).map_err(data)? + "\n").map_err(data)
    }

    fn jsonl<T: Serialize>(&mut self, name: &str, rows: impl IntoIterator<Item = T>) -> Result<(), Failure> {
        let p = self.path(name)?;
        let mut w = std::io::BufWriter::new(fs::File::create(&p).map_err(data)?);
        for r in rows {
            let v = stamp(&self.prov, &r)?;
            writeln!(w, "{}", serde_json::to_string(&v).map_err(data)?).map_err(data)?;
        }
        w.flush().map_err(data)
    }

    /// CSV with a leading `#` provenance comment.
    fn csv(&mut self, name: &str, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<(), Failure> {
        let mut buf = csv::Writer::from_writer(Vec::new());
        buf.write_record(header).map_err(data)?;
        for r in rows {
            buf.write_record(&r).map_err(data)?;
        }
        let body = String::from_utf8(buf.into_inner().map_err(data)?).map_err(data)?;
        self.raw_csv(name, &body)
    }

    fn raw_csv(&mut self, name: &str, body: &str) -> Result<(), Failure> {
        let p = self.path(name)?;
        let head = format!("# tool_version={} config_hash={}\n", self.prov.tool_version, self.prov.config_hash);
        fs::write(&p, head + body).map_err(data)
    }

    fn discard(&self) {
        for p in &self.written {
            let _ = fs::remove_file(p);
        }
    }
}

fn stamp<T: Serialize>(prov: &Provenance, body: &T) -> Result<Value, Failure> {
    let mut v = serde_json::to_value(body).map_err(data)?;
    match v.as_object_mut() {
        Some(m) => {
            m.insert("tool_version".into(), json!(prov.tool_version));
            m.insert("config_hash".into(), json!(prov.config_hash));
            Ok(v)
        }
        None => Ok(json!({"tool_version": prov.tool_version, "config_hash": prov.config_hash, "value": v})),
    }
}

/// Drop the provenance keys from a stamped record.
fn unstamp(mut v: Value) -> Value {
    if let Some(m) = v.as_object_mut() {
        m.remove("tool_version");
        m.remove("config_hash");
    }
    v
}

fn resolve(c: &Common) -> Result<RunConfig, Failure> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seeds.data = s;
    }
    if let Some(t) = c.tkr {
        cfg.tkr = t;
    }
    if let Some(d) = c.dmin {
        cfg.relevance.d_min = d;
    }
    if let Some(r) = c.ra_radius {
        cfg.metrics.ra_radius = r;
    }
    for (dst, src) in [
        (&mut cfg.paths.dataset, &c.dataset),
        (&mut cfg.paths.labels, &c.labels),
        (&mut cfg.paths.detections, &c.detections),
        (&mut cfg.paths.out, &c.out),
    ] {
        if src.is_some() {
            dst.clone_from(src);
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn read_json_value(path: &Path) -> Result<Value, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, Failure> {
    let f = fs::File::open(path).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(data)?;
        if line.trim().is_empty() {
            continue;
        }
        let v: Value = serde_json::from_str(&line).map_err(|e| Failure::Data(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(serde_json::from_value(unstamp(v)).map_err(|e| Failure::Data(format!("{}:{}: {e}", path.display(), i + 1)))?);
    }
    Ok(out)
}

/// Dataset from `paths.dataset`, or generated from the config.
fn dataset(cfg: &RunConfig) -> Result<SceneDataset, Failure> {
    let ds = match &cfg.paths.dataset {
        Some(p) => serde_json::from_value::<SceneDataset>(unstamp(read_json_value(p)?)).map_err(|e| Failure::Data(format!("{}: {e}", p.display())))?,
        None => gen_synthetic(&cfg.synthetic_spec()),
    };
    ds.validate().map_err(data)?;
    Ok(ds)
}

fn labels(cfg: &RunConfig, ds: &SceneDataset) -> Result<Vec<FrameLabels>, Failure> {
    match &cfg.paths.labels {
        Some(p) => read_jsonl(p),
        None => Ok(label_dataset(ds, &cfg.relevance)),
    }
}

fn detections(cfg: &RunConfig) -> Result<Vec<Detection>, Failure> {
    let p = cfg.paths.detections.as_ref().ok_or_else(|| Failure::Config("eval needs --detections".into()))?;
    read_jsonl::<DetectionRecord>(p)?.into_iter().map(|r| Detection::try_from(r).map_err(Failure::Data)).collect()
}

#[derive(Serialize)]
struct TraceLine<'a> {
    frame_id: &'a str,
    trace: &'a relsparse::sparsity::SparsityTrace,
}

fn run(cli: &Cli, out: &mut Outputs, cfg: &RunConfig) -> Result<(), Failure> {
    match &cli.cmd {
        Cmd::Gen => {
            let ds = gen_synthetic(&cfg.synthetic_spec());
            out.json("dataset.json", &ds)?;
            eprintln!("{} scenes, {} frames", ds.scenes.len(), ds.num_frames());
        }
        Cmd::Calibrate => {
            let ds = dataset(cfg)?;
            let cal = calibrate_dmin(&ds, &cfg.relevance).map_err(data)?;
            out.json("calibration.json", &json!({"d_min": cal.d_min, "percentile": cal.percentile, "num_pairs": cal.num_pairs}))?;
            out.csv("dist_cdf.csv", &["distance", "cdf"], cal.cdf.iter().map(|(d, c)| vec![d.to_string(), c.to_string()]))?;
            println!("d_min = {} ({} pairs, percentile {})", cal.d_min, cal.num_pairs, cal.percentile);
        }
        Cmd::Label => {
            let ds = dataset(cfg)?;
            let labels = label_dataset(&ds, &cfg.relevance);
            out.jsonl("labels.jsonl", &labels)?;
            println!("relevant fraction {}", relsparse::corridor::relevant_fraction(&labels));
        }
        Cmd::Eval => {
            let ds = dataset(cfg)?;
            let dets = detections(cfg)?;
            let labels = labels(cfg, &ds)?;
            let report = evaluate(&ds, &dets, Some(&labels), &cfg.metrics).map_err(data)?;
            out.json("metrics.json", &report)?;
            out.csv("metrics.csv", &MetricsReport::CSV_HEADER, [report.csv_row()])?;
            println!("mAP {} NDS {} mAP-RA {} NDS-RA {} NDS-RM {:?}", report.map, report.nds, report.map_ra, report.nds_ra, report.nds_rm);
        }
        Cmd::Simulate => {
            let ds = dataset(cfg)?;
            let mode = cli.common.mode.unwrap_or(harness::run_mode(cfg.tkr));
            let schedule = match mode {
                RunMode::Dense => ScheduleConfig::dense_for(&cfg.model),
                _ => cfg.schedule(),
            };
            let mut base = ModelParams::random(&cfg.model, cfg.seeds.model).map_err(data)?;
            if mode != RunMode::Dense {
                let labels = labels(cfg, &ds)?;
                for stage in [HeadStage::Token, HeadStage::Query] {
                    harness::train_relevance(cfg, &mut base, (&ds, &labels), None, stage)?;
                }
            }
            let params = harness::fitted_model(cfg, &base, &ds, &schedule)?;
            let opts = PipelineOptions { seed: cfg.seeds.routing, ..PipelineOptions::new(mode) };
            let frames = harness::run_dataset(&params, &ds, &schedule, &opts)?;
            out.jsonl("detections.jsonl", frames.iter().flat_map(|f| f.detections.iter().map(DetectionRecord::from)))?;
            out.jsonl("trace.jsonl", frames.iter().map(|f| TraceLine { frame_id: &f.frame_id, trace: &f.trace }))?;
            let n: usize = frames.iter().map(|f| f.detections.len()).sum();
            println!("{} frames, {n} detections", frames.len());
        }
        Cmd::Profile { shape } => {
            let (shape, schedule) = match shape {
                Shape::Large => (PipelineShape::large(), large_schedule(cfg.tkr)),
                Shape::Toy => (PipelineShape::toy(&cfg.model), cfg.schedule()),
            };
            let report = pipeline_flops(&shape, &schedule).map_err(data)?;
            let sens = sensitivity(&shape).map_err(data)?;
            out.json("profile.json", &json!({"shape": shape, "schedule": schedule, "report": report, "sensitivity": sens}))?;
            out.raw_csv("stages.csv", &stages_csv(&report))?;
            println!("total {} dense {} ratio {} buffer {} B", report.total, report.dense_total, report.ratio, report.buffer_bytes);
        }
        Cmd::Gradcheck => {
            let suites = all_suites(cfg.seeds.model);
            println!("{:<28} {:>6} {:>14}  result", "suite", "cases", "max_rel_err");
            for s in &suites {
                println!("{:<28} {:>6} {:>14.3e}  {}", s.suite, s.cases, s.max_rel_error, if s.passed { "pass" } else { "FAIL" });
            }
            out.json("gradcheck.json", &json!({"tolerance": TOLERANCE, "suites": suites}))?;
            let failed: Vec<&str> = suites.iter().filter(|s| !s.passed).map(|s| s.suite.as_str()).collect();
            if !failed.is_empty() {
                return Err(Failure::Check(format!("suites failed: {}", failed.join(", "))));
            }
        }
        Cmd::Curve => {
            let ds = dataset(cfg)?;
            let labels = labels(cfg, &ds)?;
            let points = harness::sparsity_curve(cfg, &ds, &labels)?;
            out.json("curve.json", &json!({ "points": points }))?;
            out.csv("curve.csv", &CURVE_HEADER, points.iter().map(|p| p.csv_row()))?;
            for p in &points {
                println!("keep {} flop_ratio {:.4} mAP {:.4} NDS {:.4}", p.keep_ratio, p.flop_ratio, p.map, p.nds);
            }
        }
    }
    Ok(())
}

fn threads() -> Result<(), Failure> {
    if let Ok(v) = std::env::var("STORE3D_THREADS") {
        let n: usize = v.parse().map_err(|_| Failure::Config(format!("STORE3D_THREADS={v} is not a count")))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| Failure::Config(e.to_string()))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let mut out: Option<Outputs> = None;
    let res = threads().and_then(|_| resolve(&cli.common)).and_then(|cfg| {
        let o = out.insert(Outputs {
            dir: cfg.paths.out.clone().unwrap_or_else(|| PathBuf::from("out")),
            prov: Provenance::of(&cfg),
            written: Vec::new(),
        });
        run(&cli, o, &cfg)
    });
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            if let Some(o) = &out {
                o.discard();
            }
            eprintln!("{}", json!({"error": f.kind(), "message": f.message(), "exit_code": f.code()}));
            ExitCode::from(f.code())
        }
    }
}
