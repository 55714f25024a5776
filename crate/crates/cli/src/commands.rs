use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use robfpca::fpca::{estimate_scores, fraction_of_variance, reconstruct};
use robfpca::simulation::{
    reproduce_table, sample_dataset, standard_cells, Cell, CellLoss, ScoreFamily, TableKind, TruthPopulation,
};
use robfpca::smoothing::CvSelection;
use robfpca::{EigenSystem, FitResult, FunctionalDataset, Loss, LossFamily, MeanEstimate};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::io::{self, num, Table};
use crate::plot::{Chart, Series};
use crate::CliError;

/// What `scores` and `reconstruct` need from a fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub loss: Loss,
    pub mean: MeanEstimate,
    pub eigen: EigenSystem,
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

fn prepare_out(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Input(format!("{}: {e}", dir.display())))
}

fn load_model(path: &Path) -> Result<Model, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

fn dataset_path(cfg: &RunConfig, explicit: &Option<PathBuf>) -> Result<PathBuf, CliError> {
    explicit
        .clone()
        .or_else(|| cfg.data.clone())
        .ok_or_else(|| CliError::Input("no dataset given (use --data or the config's \"data\")".into()))
}

fn loss_text(loss: &Loss) -> String {
    if loss.family == LossFamily::LocalSmoothAbs {
        format!("{} (kappa {})", loss.family, loss.kappa)
    } else {
        loss.family.to_string()
    }
}

fn cv_text(sel: &CvSelection) -> String {
    sel.candidates
        .iter()
        .zip(&sel.scores)
        .map(|(h, s)| match s {
            Some(s) => format!("{h:.4}:{s:.6}"),
            None => format!("{h:.4}:invalid"),
        })
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn summary(res: &FitResult, data: &FunctionalDataset, clamped: usize) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "subjects: {}", data.n());
    let _ = writeln!(s, "observations: {}", data.total_observations());
    let _ = writeln!(s, "loss: {}", loss_text(&res.mean.loss));
    if let Some(k) = &res.mean.kappa {
        let _ = writeln!(s, "kappa: {} (cross-validated)", k.selected);
        for ((kappa, h), score) in k.candidates.iter().zip(&k.bandwidths).zip(&k.scores) {
            let score = score.map(|v| format!("{v:.6}")).unwrap_or_else(|| "invalid".into());
            let _ = writeln!(s, "  kappa {kappa}: h {h:.4}, cv {score}");
        }
    }
    let _ = writeln!(s, "mean bandwidth: {:.4}", res.mean.bandwidth.selected);
    let _ = writeln!(s, "  cv {}", cv_text(&res.mean.bandwidth));
    let _ = writeln!(s, "covariance bandwidth: {:.4}", res.covariance.bandwidth.selected);
    let _ = writeln!(s, "  cv {}", cv_text(&res.covariance.bandwidth));
    match res.split {
        Some((a, b)) => {
            let _ = writeln!(s, "split sample: mean from subjects 1-{a}, covariance from subjects {}-{}", a + 1, a + b);
        }
        None => {
            let _ = writeln!(s, "split sample: no");
        }
    }
    let (per, cum) = fraction_of_variance(&res.eigen);
    let _ = writeln!(s, "components: {}", res.eigen.components());
    let _ = writeln!(s, "  k  lambda        fve     cumulative");
    for (k, ((l, f), c)) in res.eigen.values.iter().zip(&per).zip(&cum).enumerate() {
        let _ = writeln!(s, "  {:<2} {:<12.6}  {:<6.4}  {:.4}", k + 1, l, f, c);
    }
    let _ = writeln!(s, "mean grid points filled: {}", res.mean.mean.filled.iter().filter(|&&f| f).count());
    let _ = writeln!(s, "covariance nodes filled: {}", res.covariance.surface.filled.iter().filter(|&&f| f).count());
    let _ = writeln!(s, "reconstruction clamps at observed times: {clamped}");
    s
}

pub fn fit(cfg: &RunConfig, data_arg: &Option<PathBuf>) -> Result<(), CliError> {
    let path = dataset_path(cfg, data_arg)?;
    let data = io::load_dataset(&path, cfg.rescale_time)?;
    let res = robfpca::fit(&data, &cfg.fit)?;
    let out = &cfg.out;
    prepare_out(out)?;

    let mut t = Table::create(&out.join("mean.csv"), &["t", "value"])?;
    for (g, v) in res.mean.mean.grid.points().iter().zip(&res.mean.mean.values) {
        t.row([num(*g), num(*v)])?;
    }
    t.finish()?;

    let surface = &res.covariance.surface;
    let pts = surface.grid.points();
    let mut t = Table::create(&out.join("covariance.csv"), &["s", "t", "value"])?;
    for (i, s) in pts.iter().enumerate() {
        for (j, u) in pts.iter().enumerate() {
            t.row([num(*s), num(*u), num(surface.at(i, j))])?;
        }
    }
    t.finish()?;

    let mut t = Table::create(&out.join("eigen.csv"), &["k", "lambda", "t", "phi"])?;
    for (k, (l, f)) in res.eigen.values.iter().zip(&res.eigen.functions).enumerate() {
        for (g, v) in res.eigen.grid.points().iter().zip(f) {
            t.row([(k + 1).to_string(), num(*l), num(*g), num(*v)])?;
        }
    }
    t.finish()?;

    let mut t = Table::create(&out.join("scores.csv"), &["subject_id", "k", "score"])?;
    for (id, row) in res.scores.ids.iter().zip(&res.scores.scores) {
        for (k, v) in row.iter().enumerate() {
            t.row([id.clone(), (k + 1).to_string(), num(*v)])?;
        }
    }
    t.finish()?;

    let mut clamped = 0;
    for (subject, row) in data.subjects().iter().zip(&res.scores.scores) {
        clamped += reconstruct(&res.mean.mean, &res.eigen, row, &res.mean.loss, &subject.times)?.clamped;
    }
    let model = Model { loss: res.mean.loss, mean: res.mean.mean.clone(), eigen: res.eigen.clone() };
    write_file(&out.join("model.json"), &(serde_json::to_string(&model).expect("model serializes") + "\n"))?;
    let mut echo = cfg.clone();
    echo.data = Some(path);
    write_file(&out.join("config-echo.json"), &echo.echo())?;
    let text = summary(&res, &data, clamped);
    write_file(&out.join("summary.txt"), &text)?;
    print!("{text}");
    Ok(())
}

pub struct SimulateArgs {
    pub family: Option<String>,
    pub n: Option<usize>,
    pub m: Option<usize>,
    pub contamination: Option<f64>,
    pub basis_count: Option<usize>,
    pub noise_sd: Option<f64>,
}

pub fn simulate(cfg: &mut RunConfig, args: &SimulateArgs) -> Result<(), CliError> {
    let sim = &mut cfg.simulate;
    if let Some(f) = &args.family {
        sim.family = f.parse::<ScoreFamily>()?;
    }
    if let Some(n) = args.n {
        sim.n = n;
    }
    if let Some(m) = args.m {
        sim.m = m;
    }
    if let Some(a) = args.contamination {
        sim.contamination_prob = a;
    }
    if let Some(k) = args.basis_count {
        sim.basis_count = k;
    }
    if let Some(s) = args.noise_sd {
        sim.noise_sd = s;
    }
    let data = sample_dataset(sim)?;
    prepare_out(&cfg.out)?;
    let path = cfg.out.join("data.csv");
    io::save_dataset(&path, &data)?;
    write_file(&cfg.out.join("config-echo.json"), &cfg.echo())?;
    println!("wrote {} subjects, {} observations to {}", data.n(), data.total_observations(), path.display());
    Ok(())
}

pub struct ReproduceArgs {
    pub table: String,
    pub cells: Vec<String>,
    pub losses: Option<Vec<String>>,
    pub runs: Option<usize>,
    pub basis_count: Option<usize>,
    pub truth_samples: Option<usize>,
    pub truth_reps: Option<usize>,
    pub truth_population: Option<String>,
}

pub fn reproduce(cfg: &mut RunConfig, args: &ReproduceArgs) -> Result<(), CliError> {
    let table: TableKind = args.table.parse()?;
    let opts = &mut cfg.reproduce;
    if let Some(r) = args.runs {
        opts.runs = r;
    }
    if let Some(k) = args.basis_count {
        opts.basis_count = k;
    }
    if let Some(s) = args.truth_samples {
        opts.truth_samples = s;
    }
    if let Some(r) = args.truth_reps {
        opts.truth_reps = r;
    }
    if let Some(p) = &args.truth_population {
        opts.truth_population = match p.as_str() {
            "clean" => TruthPopulation::Clean,
            "contaminated" => TruthPopulation::Contaminated,
            other => return Err(CliError::Input(format!("unknown truth population '{other}'"))),
        };
    }
    let cells: Vec<Cell> = if args.cells.is_empty() {
        let losses: Vec<CellLoss> = match &args.losses {
            Some(l) => l.iter().map(|s| s.parse()).collect::<Result<_, _>>()?,
            None => match table {
                TableKind::Mean => vec!["rho0".parse()?, CellLoss::TunedKappa],
                TableKind::Covariance => vec!["rho0".parse()?, "rho2".parse()?],
            },
        };
        standard_cells(&losses)
    } else {
        args.cells.iter().map(|c| c.parse()).collect::<Result<_, _>>()?
    };
    let report = reproduce_table(table, &cells, opts)?;
    prepare_out(&cfg.out)?;
    write_file(&cfg.out.join("report.csv"), &report.to_csv())?;
    let text = report.to_text();
    write_file(&cfg.out.join("report.txt"), &text)?;
    let mut t = Table::create(&cfg.out.join("runs.csv"), &["cell", "run", "metric", "kappa"])?;
    for row in &report.rows {
        for (r, (m, k)) in row.metrics.iter().zip(&row.kappas).enumerate() {
            let m = m.map(num).unwrap_or_default();
            let k = k.map(num).unwrap_or_default();
            t.row([row.cell.id(), (r + 1).to_string(), m, k])?;
        }
    }
    t.finish()?;
    write_file(&cfg.out.join("config-echo.json"), &cfg.echo())?;
    print!("{text}");
    for row in &report.rows {
        if let Some(e) = &row.first_error {
            println!("{}: {} of {} runs failed, first error: {e}", row.cell.id(), row.excluded, row.runs + row.excluded);
        }
    }
    Ok(())
}

pub struct PlotArgs {
    pub kind: String,
    pub input: Option<PathBuf>,
    pub components: Option<usize>,
    pub range: f64,
}

fn read_pairs(path: &Path, header: &[&str]) -> Result<Vec<(f64, f64)>, CliError> {
    io::read_table(path, header)?
        .into_iter()
        .map(|(line, f)| Ok((io::field(path, line, header[0], &f[0])?, io::field(path, line, header[1], &f[1])?)))
        .collect()
}

pub fn plot(cfg: &RunConfig, args: &PlotArgs) -> Result<(), CliError> {
    let need_input = || args.input.clone().ok_or_else(|| CliError::Input(format!("plot kind '{}' needs --input", args.kind)));
    let chart = match args.kind.as_str() {
        "mean" => {
            let points = read_pairs(&need_input()?, &["t", "value"])?;
            Chart {
                title: "Mean function".into(),
                x_label: "t".into(),
                y_label: "mu(t)".into(),
                series: vec![Series { label: "mean".into(), points, dashed: false }],
            }
        }
        "eigen" => {
            let path = need_input()?;
            let rows = io::read_table(&path, &["k", "lambda", "t", "phi"])?;
            let mut series: Vec<Series> = Vec::new();
            for (line, f) in rows {
                let k: usize = f[0].parse().map_err(|_| CliError::Input(format!("{}: line {line}: bad k", path.display())))?;
                if args.components.is_some_and(|c| k > c) {
                    continue;
                }
                let lambda = io::field(&path, line, "lambda", &f[1])?;
                let p = (io::field(&path, line, "t", &f[2])?, io::field(&path, line, "phi", &f[3])?);
                if series.len() < k {
                    series.push(Series { label: format!("phi{k} (lambda {lambda:.4})"), points: Vec::new(), dashed: false });
                }
                series[k - 1].points.push(p);
            }
            Chart { title: "Eigenfunctions".into(), x_label: "t".into(), y_label: "phi(t)".into(), series }
        }
        "loss" => {
            let loss = match &cfg.fit.loss {
                robfpca::LossChoice::Fixed(l) => *l,
                robfpca::LossChoice::TunedKappa(k) => Loss::local_smooth_abs(k.first().copied().unwrap_or(1.0))?,
            };
            let r = args.range;
            if !(r > 0.0 && r.is_finite()) {
                return Err(CliError::Input(format!("range must be positive, got {r}")));
            }
            let xs: Vec<f64> = (0..=400).map(|i| -r + 2.0 * r * i as f64 / 400.0).collect();
            Chart {
                title: format!("Loss {}", loss_text(&loss)),
                x_label: "x".into(),
                y_label: "rho(x)".into(),
                series: vec![
                    Series { label: loss_text(&loss), points: xs.iter().map(|&x| (x, loss.rho(x))).collect(), dashed: false },
                    Series { label: "|x|".into(), points: xs.iter().map(|&x| (x, x.abs())).collect(), dashed: true },
                ],
            }
        }
        other => return Err(CliError::Input(format!("unknown plot kind '{other}' (mean, eigen, loss)"))),
    };
    prepare_out(&cfg.out)?;
    let path = cfg.out.join(format!("{}.svg", args.kind));
    write_file(&path, &chart.to_svg())?;
    println!("wrote {}", path.display());
    Ok(())
}

pub fn scores(cfg: &RunConfig, model: &Path, data_arg: &Option<PathBuf>, components: Option<usize>) -> Result<(), CliError> {
    let model = load_model(model)?;
    let eigen = truncate(&model.eigen, components);
    let data = io::load_dataset(&dataset_path(cfg, data_arg)?, cfg.rescale_time)?;
    let sm = estimate_scores(&data, &model.mean, &eigen, &model.loss)?;
    prepare_out(&cfg.out)?;
    let mut t = Table::create(&cfg.out.join("scores.csv"), &["subject_id", "k", "score"])?;
    for (id, row) in sm.ids.iter().zip(&sm.scores) {
        for (k, v) in row.iter().enumerate() {
            t.row([id.clone(), (k + 1).to_string(), num(*v)])?;
        }
    }
    t.finish()?;
    println!("scored {} subjects on {} components", sm.ids.len(), eigen.components());
    Ok(())
}

fn truncate(eigen: &EigenSystem, components: Option<usize>) -> EigenSystem {
    match components {
        Some(k) => eigen.truncated(k),
        None => eigen.clone(),
    }
}

/// Scores grouped by subject in first-appearance order; components must be 1..=K without gaps.
fn read_scores(path: &Path) -> Result<Vec<(String, Vec<f64>)>, CliError> {
    let mut out: Vec<(String, Vec<f64>)> = Vec::new();
    for (line, f) in io::read_table(path, &["subject_id", "k", "score"])? {
        let k: usize = f[1].parse().map_err(|_| CliError::Input(format!("{}: line {line}: bad k '{}'", path.display(), f[1])))?;
        let v = io::field(path, line, "score", &f[2])?;
        let pos = match out.iter().position(|(id, _)| *id == f[0]) {
            Some(p) => p,
            None => {
                out.push((f[0].clone(), Vec::new()));
                out.len() - 1
            }
        };
        if k != out[pos].1.len() + 1 {
            return Err(CliError::Input(format!("{}: line {line}: expected k = {}", path.display(), out[pos].1.len() + 1)));
        }
        out[pos].1.push(v);
    }
    Ok(out)
}

pub struct ReconstructArgs {
    pub model: PathBuf,
    pub scores: PathBuf,
    pub data: Option<PathBuf>,
    pub components: Option<usize>,
}

pub fn reconstruct_cmd(cfg: &RunConfig, args: &ReconstructArgs) -> Result<(), CliError> {
    let model = load_model(&args.model)?;
    let eigen = truncate(&model.eigen, args.components);
    let scores = read_scores(&args.scores)?;
    let data = match args.data.clone().or_else(|| cfg.data.clone()) {
        Some(p) => Some(io::load_dataset(&p, cfg.rescale_time)?),
        None => None,
    };
    prepare_out(&cfg.out)?;
    let mut t = Table::create(&cfg.out.join("reconstruction.csv"), &["subject_id", "t", "value"])?;
    let mut clamped = 0;
    for (id, xi) in &scores {
        let times: Vec<f64> = match &data {
            Some(d) => d
                .subjects()
                .iter()
                .find(|s| s.id == *id)
                .ok_or_else(|| CliError::Input(format!("subject {id} is not in the dataset")))?
                .times
                .clone(),
            None => model.mean.grid.points().to_vec(),
        };
        let k = eigen.components().min(xi.len());
        let r = reconstruct(&model.mean, &eigen.truncated(k), &xi[..k], &model.loss, &times)?;
        clamped += r.clamped;
        for (tt, v) in r.times.iter().zip(&r.values) {
            t.row([id.clone(), num(*tt), num(*v)])?;
        }
    }
    t.finish()?;
    println!("reconstructed {} subjects, {} values clamped", scores.len(), clamped);
    Ok(())
}
