//! CSV and JSON artifacts.
//!
//! | file | columns |
//! |---|---|
//! | units | `id,x_km,y_km` |
//! | panel | `id,<time label>...`, one 0/1 row per unit |
//! | beta | `id,beta_true` |
//! | posterior summary | `id,beta_mean,beta_sd,beta_q025,beta_q975` |
//! | hyper summary | `parameter,mean,sd,q025,q975,ess,split_rhat` |
//! | acceptance | `block,rate` |
//! | chain | `draw,log_posterior,<hyper>...,beta[<id>]...` |
//! | correlogram | `bin_center_km,estimate,env_lo,env_hi,n_pairs` |
//! | losses | `id,loss` |
//! | split | `id,role` |
//! | benchmark | `scenario,model,replicate,mspe,spearman_model,spearman_incidence,oos_ce,seconds` |

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use flate2::write::GzEncoder;
use flate2::Compression;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use susmap_core::evaluate::{EvalReport, OrderingCheck, Split, TableRow};
use susmap_core::mcmc::{Chain, PosteriorSummary};
use susmap_core::modelchoice::Correlogram;
use susmap_core::picar::PicarBasis;
use susmap_core::{OutbreakPanel, SpatialUnits, SusceptibilityField};

use crate::error::{CliError, CliResult};

pub const UNITS_HEADER: &[&str] = &["id", "x_km", "y_km"];
pub const BETA_HEADER: &[&str] = &["id", "beta_true"];
pub const POSTERIOR_HEADER: &[&str] = &["id", "beta_mean", "beta_sd", "beta_q025", "beta_q975"];
pub const HYPER_HEADER: &[&str] = &["parameter", "mean", "sd", "q025", "q975", "ess", "split_rhat"];
pub const ACCEPTANCE_HEADER: &[&str] = &["block", "rate"];
pub const CORRELOGRAM_HEADER: &[&str] = &["bin_center_km", "estimate", "env_lo", "env_hi", "n_pairs"];
pub const LOSSES_HEADER: &[&str] = &["id", "loss"];
pub const SPLIT_HEADER: &[&str] = &["id", "role"];
pub const BENCH_HEADER: &[&str] = &[
    "scenario",
    "model",
    "replicate",
    "mspe",
    "spearman_model",
    "spearman_incidence",
    "oos_ce",
    "seconds",
];
pub const TABLE_HEADER: &[&str] = &[
    "scenario",
    "model",
    "n_replicates",
    "median_mspe",
    "median_spearman_model",
    "median_spearman_incidence",
    "median_oos_ce",
    "spearman_wins",
    "complete",
];
pub const CHECKS_HEADER: &[&str] = &["scenario", "claim", "pass"];

/// Shortest decimal that parses back to the same `f64`.
pub fn num(x: f64) -> String {
    format!("{x:?}")
}

fn opt_num(x: Option<f64>) -> String {
    x.map(num).unwrap_or_default()
}

fn open_reader(path: &Path) -> CliResult<csv::Reader<File>> {
    let f = File::open(path).map_err(|e| CliError::io(path, e))?;
    Ok(csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(f))
}

fn check_header(path: &Path, r: &mut csv::Reader<File>, expected: &[&str]) -> CliResult<()> {
    let h = r.headers().map_err(|e| CliError::format(path, e.to_string()))?;
    if h.iter().ne(expected.iter().copied()) {
        return Err(CliError::format(
            path,
            format!("expected header '{}', found '{}'", expected.join(","), h.iter().collect::<Vec<_>>().join(",")),
        ));
    }
    Ok(())
}

fn parse_f64(path: &Path, line: u64, field: &str) -> CliResult<f64> {
    field
        .parse::<f64>()
        .map_err(|_| CliError::format(path, format!("line {line}: '{field}' is not a number")))
}

/// Writes CSV rows to a file, optionally gzip-compressed.
pub struct CsvSink {
    path: PathBuf,
    w: csv::Writer<Box<dyn Write>>,
}

impl CsvSink {
    pub fn create(path: &Path, header: &[&str]) -> CliResult<Self> {
        let f = File::create(path).map_err(|e| CliError::io(path, e))?;
        let inner: Box<dyn Write> = if path.extension().is_some_and(|e| e == "gz") {
            Box::new(GzEncoder::new(BufWriter::new(f), Compression::default()))
        } else {
            Box::new(BufWriter::new(f))
        };
        let mut s = Self { path: path.to_path_buf(), w: csv::Writer::from_writer(inner) };
        s.row(header.iter().copied())?;
        Ok(s)
    }

    pub fn row<I, S>(&mut self, fields: I) -> CliResult<()>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<[u8]>,
    {
        self.w.write_record(fields).map_err(|e| CliError::format(&self.path, e.to_string()))
    }

    pub fn finish(self) -> CliResult<()> {
        let path = self.path;
        let inner = self.w.into_inner().map_err(|e| CliError::format(&path, e.to_string()))?;
        // dropping the encoder finalises the gzip stream; flush first to see errors
        let mut inner = inner;
        inner.flush().map_err(|e| CliError::io(&path, e))
    }
}

pub fn write_units(path: &Path, units: &SpatialUnits) -> CliResult<()> {
    let mut s = CsvSink::create(path, UNITS_HEADER)?;
    for (id, c) in units.ids().iter().zip(units.coords()) {
        s.row([id.clone(), num(c[0]), num(c[1])])?;
    }
    s.finish()
}

pub fn read_units(path: &Path) -> CliResult<SpatialUnits> {
    let mut r = open_reader(path)?;
    check_header(path, &mut r, UNITS_HEADER)?;
    let (mut ids, mut coords) = (Vec::new(), Vec::new());
    for (k, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| CliError::format(path, e.to_string()))?;
        let line = k as u64 + 2;
        ids.push(rec[0].to_string());
        coords.push([parse_f64(path, line, &rec[1])?, parse_f64(path, line, &rec[2])?]);
    }
    SpatialUnits::new(ids, coords).map_err(|e| CliError::format(path, e.to_string()))
}

pub fn write_panel(path: &Path, units: &SpatialUnits, panel: &OutbreakPanel) -> CliResult<()> {
    let header: Vec<&str> = std::iter::once("id").chain(panel.time_labels().iter().map(String::as_str)).collect();
    let mut s = CsvSink::create(path, &header)?;
    for (i, id) in units.ids().iter().enumerate() {
        let row: Vec<String> = std::iter::once(id.clone())
            .chain(panel.row(i).iter().map(|v| v.to_string()))
            .collect();
        s.row(row)?;
    }
    s.finish()
}

/// Reads a wide panel and orders its rows like `units`.
pub fn read_panel(path: &Path, units: &SpatialUnits) -> CliResult<OutbreakPanel> {
    let mut r = open_reader(path)?;
    let header = r.headers().map_err(|e| CliError::format(path, e.to_string()))?.clone();
    if header.len() < 3 || &header[0] != "id" {
        return Err(CliError::format(path, "expected header 'id,<time>,<time>,...' with at least two time columns"));
    }
    let labels: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    let t = labels.len();
    let n = units.len();
    let mut y = vec![0u8; n * t];
    let mut seen = vec![false; n];
    for (k, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| CliError::format(path, e.to_string()))?;
        let line = k + 2;
        let i = units
            .index_of(&rec[0])
            .ok_or_else(|| CliError::format(path, format!("line {line}: unit '{}' is not in the units file", &rec[0])))?;
        if std::mem::replace(&mut seen[i], true) {
            return Err(CliError::format(path, format!("line {line}: unit '{}' appears twice", &rec[0])));
        }
        for (c, f) in rec.iter().skip(1).enumerate() {
            y[i * t + c] = match f {
                "0" => 0,
                "1" => 1,
                other => {
                    return Err(CliError::format(path, format!("line {line}: outbreak status must be 0 or 1, got '{other}'")))
                }
            };
        }
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        return Err(CliError::format(path, format!("unit '{}' has no row", units.ids()[i])));
    }
    OutbreakPanel::with_labels(n, t, y, labels).map_err(|e| CliError::format(path, e.to_string()))
}

pub fn write_beta(path: &Path, units: &SpatialUnits, beta: &[f64]) -> CliResult<()> {
    let mut s = CsvSink::create(path, BETA_HEADER)?;
    for (id, b) in units.ids().iter().zip(beta) {
        s.row([id.clone(), num(*b)])?;
    }
    s.finish()
}

pub fn read_beta(path: &Path, units: &SpatialUnits) -> CliResult<SusceptibilityField> {
    let mut r = open_reader(path)?;
    check_header(path, &mut r, BETA_HEADER)?;
    let mut beta = vec![f64::NAN; units.len()];
    for (k, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| CliError::format(path, e.to_string()))?;
        let line = k as u64 + 2;
        let i = units
            .index_of(&rec[0])
            .ok_or_else(|| CliError::format(path, format!("line {line}: unit '{}' is not in the units file", &rec[0])))?;
        beta[i] = parse_f64(path, line, &rec[1])?;
    }
    if let Some(i) = beta.iter().position(|b| b.is_nan()) {
        return Err(CliError::format(path, format!("unit '{}' has no value", units.ids()[i])));
    }
    SusceptibilityField::new(beta).map_err(|e| CliError::format(path, e.to_string()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Internal(e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::format(path, e.to_string()))
}

pub fn write_posterior_summary(path: &Path, units: &SpatialUnits, s: &PosteriorSummary) -> CliResult<()> {
    let mut w = CsvSink::create(path, POSTERIOR_HEADER)?;
    for (id, p) in units.ids().iter().zip(&s.beta) {
        w.row([id.clone(), num(p.mean), num(p.sd), num(p.q025), num(p.q975)])?;
    }
    w.finish()
}

pub fn write_hyper_summary(path: &Path, s: &PosteriorSummary) -> CliResult<()> {
    let mut w = CsvSink::create(path, HYPER_HEADER)?;
    for h in &s.hyper {
        let p = &h.summary;
        w.row([h.name.clone(), num(p.mean), num(p.sd), num(p.q025), num(p.q975), num(p.ess), num(h.split_rhat)])?;
    }
    w.finish()
}

pub fn write_acceptance(path: &Path, acceptance: &[(String, f64)]) -> CliResult<()> {
    let mut w = CsvSink::create(path, ACCEPTANCE_HEADER)?;
    for (b, r) in acceptance {
        w.row([b.clone(), num(*r)])?;
    }
    w.finish()
}

pub fn write_chain(path: &Path, units: &SpatialUnits, chain: &Chain) -> CliResult<()> {
    let mut header: Vec<String> = vec!["draw".into(), "log_posterior".into()];
    header.extend(chain.hyper.iter().map(|(n, _)| n.clone()));
    header.extend(units.ids().iter().map(|id| format!("beta[{id}]")));
    let h: Vec<&str> = header.iter().map(String::as_str).collect();
    let mut w = CsvSink::create(path, &h)?;
    for s in 0..chain.n_draws() {
        let mut row = vec![s.to_string(), num(chain.log_posterior[s])];
        row.extend(chain.hyper.iter().map(|(_, v)| num(v[s])));
        row.extend(chain.beta_draw(s).iter().map(|b| num(*b)));
        w.row(row)?;
    }
    w.finish()
}

pub fn write_correlogram(path: &Path, c: &Correlogram) -> CliResult<()> {
    let mut w = CsvSink::create(path, CORRELOGRAM_HEADER)?;
    for b in 0..c.bin_centers.len() {
        w.row([
            num(c.bin_centers[b]),
            opt_num(c.estimate[b]),
            opt_num(c.env_lo[b]),
            opt_num(c.env_hi[b]),
            c.n_pairs[b].to_string(),
        ])?;
    }
    w.finish()
}

pub fn write_losses(path: &Path, units: &SpatialUnits, losses: &[f64]) -> CliResult<()> {
    let mut w = CsvSink::create(path, LOSSES_HEADER)?;
    for (id, l) in units.ids().iter().zip(losses) {
        w.row([id.clone(), num(*l)])?;
    }
    w.finish()
}

pub fn write_split(path: &Path, units: &SpatialUnits, split: &Split) -> CliResult<()> {
    let mut role = vec!["train"; units.len()];
    for &i in &split.test {
        role[i] = "test";
    }
    let mut w = CsvSink::create(path, SPLIT_HEADER)?;
    for (id, r) in units.ids().iter().zip(role) {
        w.row([id.as_str(), r])?;
    }
    w.finish()
}

pub fn write_reports(path: &Path, reports: &[EvalReport]) -> CliResult<()> {
    let mut w = CsvSink::create(path, BENCH_HEADER)?;
    for r in reports {
        w.row([
            r.scenario.clone(),
            r.model.to_string(),
            r.replicate.to_string(),
            num(r.mspe),
            num(r.spearman_model),
            num(r.spearman_incidence),
            num(r.oos_ce),
            opt_num(r.seconds),
        ])?;
    }
    w.finish()
}

pub fn write_table(path: &Path, rows: &[TableRow]) -> CliResult<()> {
    let mut w = CsvSink::create(path, TABLE_HEADER)?;
    for r in rows {
        w.row([
            r.scenario.clone(),
            r.model.to_string(),
            r.n_replicates.to_string(),
            num(r.median_mspe),
            num(r.median_spearman_model),
            num(r.median_spearman_incidence),
            num(r.median_oos_ce),
            r.spearman_wins.to_string(),
            r.complete.to_string(),
        ])?;
    }
    w.finish()
}

pub fn write_checks(path: &Path, checks: &[OrderingCheck]) -> CliResult<()> {
    let mut w = CsvSink::create(path, CHECKS_HEADER)?;
    for c in checks {
        w.row([c.scenario.clone(), c.claim.clone(), c.pass.to_string()])?;
    }
    w.finish()
}

/// Mesh vertices, Moran basis and projector of a PICAR fit.
pub fn write_basis(dir: &Path, units: &SpatialUnits, b: &PicarBasis) -> CliResult<Vec<PathBuf>> {
    let vp = dir.join("basis_vertices.csv");
    let mut w = CsvSink::create(&vp, &["vertex", "x_km", "y_km"])?;
    for (k, v) in b.mesh.vertices.iter().enumerate() {
        w.row([k.to_string(), num(v[0]), num(v[1])])?;
    }
    w.finish()?;

    let mp = dir.join("basis_moran.csv");
    let cols: Vec<String> = (0..b.rank()).map(|c| format!("m{c}")).collect();
    let header: Vec<&str> = std::iter::once("vertex").chain(cols.iter().map(String::as_str)).collect();
    let mut w = CsvSink::create(&mp, &header)?;
    for r in 0..b.m.nrows() {
        let row: Vec<String> = std::iter::once(r.to_string()).chain(b.m.row(r).iter().map(|v| num(*v))).collect();
        w.row(row)?;
    }
    w.finish()?;

    let ap = dir.join("basis_projector.csv");
    let mut w = CsvSink::create(&ap, &["id", "vertex", "weight"])?;
    for (id, row) in units.ids().iter().zip(&b.a.rows) {
        for &(v, wt) in row {
            w.row([id.clone(), v.to_string(), num(wt)])?;
        }
    }
    w.finish()?;
    Ok(vec![vp, mp, ap])
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    let mut f = File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut h = Sha256::new();
    let mut buf = [0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf).map_err(|e| CliError::io(path, e))?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

/// Parses every data row of a CSV and checks its column count against the
/// header. Used to self-validate artifacts.
pub fn validate_csv(path: &Path, header: &[&str]) -> CliResult<usize> {
    let mut r = open_reader(path)?;
    check_header(path, &mut r, header)?;
    let mut n = 0;
    for rec in r.records() {
        let rec = rec.map_err(|e| CliError::format(path, e.to_string()))?;
        if rec.len() != header.len() {
            return Err(CliError::format(path, "ragged row"));
        }
        n += 1;
    }
    Ok(n)
}
