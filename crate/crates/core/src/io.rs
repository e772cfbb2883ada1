//! File formats: granules, chains, predictions, truths and metrics.
//!
//! Text files are comma-separated with a header row. Floats are written with
//! Rust's shortest round-trip formatting, so every value reads back bit-exact.
//! Every writer goes through a temporary file in the destination directory
//! followed by a rename.

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use crate::chain::{ChainOutput, ChainRecord};
use crate::error::{Error, Result};
use crate::metrics::{Metrics, MetricsReport};
use crate::model::{Flag, Granule};
use crate::predict::{PredictiveSummary, Target};

pub const GRANULE_HEADER: [&str; 6] = ["lon", "lat", "level_index", "pressure_hPa", "temperature_K", "qf"];
pub const CHAIN_VERSION: &str = "v1";
const CHAIN_MAGIC: &str = "# lvcs-chain";
const LATENT_MAGIC: &[u8; 8] = b"LVCSLAT1";
const DRAWS_MAGIC: &[u8; 8] = b"LVCSDRW1";

/// Writes `path` by filling a sibling temp file and renaming it into place.
pub fn write_atomic<F>(path: &Path, fill: F) -> Result<()>
where
    F: FnOnce(&mut BufWriter<File>) -> Result<()>,
{
    let name = path
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("not a file path: {}", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(name);
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    let result = (|| {
        let mut w = BufWriter::new(File::create(&tmp).map_err(Error::file(path))?);
        fill(&mut w)?;
        w.flush()?;
        w.get_ref().sync_all()?;
        Ok(())
    })();
    match result {
        Ok(()) => fs::rename(&tmp, path).map_err(Error::from),
        Err(e) => {
            let _ = fs::remove_file(&tmp);
            Err(e)
        }
    }
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Sidecar holding the latent fields of a chain file.
pub fn latent_path(chain: &Path) -> PathBuf {
    with_suffix(chain, ".latent.bin")
}

/// Sidecar holding the predictive draws of a prediction file.
pub fn draws_path(pred: &Path) -> PathBuf {
    with_suffix(pred, ".draws.bin")
}

fn csv_err(e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        kind => Error::Parse {
            line,
            message: format!("{kind:?}"),
        },
    }
}

fn reader(path: &Path) -> Result<csv::Reader<File>> {
    let file = File::open(path).map_err(Error::file(path))?;
    Ok(csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(file))
}

fn parse_f64(field: &str, what: &str, line: usize) -> Result<f64> {
    field.parse::<f64>().map_err(|_| Error::Parse {
        line,
        message: format!("{what}: cannot parse {field:?} as a number"),
    })
}

fn check_header(headers: &csv::StringRecord, expected: &[&str], optional_tail: usize) -> Result<()> {
    let got: Vec<&str> = headers.iter().collect();
    let min = expected.len() - optional_tail;
    if got.len() < min || got.len() > expected.len() || got[..] != expected[..got.len()] {
        return Err(Error::Parse {
            line: 1,
            message: format!("expected header {:?}, found {:?}", expected.join(","), got.join(",")),
        });
    }
    Ok(())
}

fn record_line(rec: &csv::StringRecord) -> usize {
    rec.position().map(|p| p.line() as usize).unwrap_or(0)
}

fn fields<'a>(rec: &'a csv::StringRecord, n: usize) -> Result<Vec<&'a str>> {
    if rec.len() != n {
        return Err(Error::Parse {
            line: record_line(rec),
            message: format!("expected {n} fields, found {}", rec.len()),
        });
    }
    Ok(rec.iter().collect())
}

/// A granule read from disk together with the all-undefined levels removed.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedGranule {
    pub granule: Granule,
    pub dropped_levels: Vec<u32>,
}

/// Reads a granule file. Rows may come in any order; the grid must be
/// complete. Missing temperatures are empty fields, and an empty or `NA`
/// quality flag marks a structurally undefined cell.
pub fn load_granule(path: &Path) -> Result<LoadedGranule> {
    let mut rdr = reader(path)?;
    check_header(rdr.headers().map_err(csv_err)?, &GRANULE_HEADER, 0)?;

    let mut loc_index: HashMap<(u64, u64), usize> = HashMap::new();
    let mut locs: Vec<(f64, f64)> = Vec::new();
    let mut levels: HashMap<u32, (f64, usize)> = HashMap::new();
    let mut cells: HashMap<(usize, u32), (f64, Flag, usize)> = HashMap::new();

    for rec in rdr.records() {
        let rec = rec.map_err(csv_err)?;
        let line = record_line(&rec);
        let f = fields(&rec, 6)?;
        let lon = parse_f64(f[0], "lon", line)?;
        let lat = parse_f64(f[1], "lat", line)?;
        let level: u32 = f[2].parse().map_err(|_| Error::Parse {
            line,
            message: format!("level_index: cannot parse {:?} as a non-negative integer", f[2]),
        })?;
        let pressure = parse_f64(f[3], "pressure_hPa", line)?;
        let temperature = match f[4] {
            "" | "NA" | "NaN" => f64::NAN,
            s => parse_f64(s, "temperature_K", line)?,
        };
        let flag = match f[5] {
            "" | "NA" => Flag::Undefined,
            s => s.parse::<u8>().ok().and_then(Flag::from_code).ok_or_else(|| Error::Parse {
                line,
                message: format!("qf must be 0, 1, 2 or empty, found {s:?}"),
            })?,
        };
        if flag.is_observed() && !temperature.is_finite() {
            return Err(Error::Parse {
                line,
                message: format!("qf {} requires a temperature", f[5]),
            });
        }
        match levels.get(&level) {
            Some(&(p, first)) if p != pressure => {
                return Err(Error::Parse {
                    line,
                    message: format!("level {level} has pressure {pressure} here but {p} on line {first}"),
                })
            }
            Some(_) => {}
            None => {
                levels.insert(level, (pressure, line));
            }
        }
        let key = (lon.to_bits(), lat.to_bits());
        let i = *loc_index.entry(key).or_insert_with(|| {
            locs.push((lon, lat));
            locs.len() - 1
        });
        if let Some(&(_, _, first)) = cells.get(&(i, level)) {
            return Err(Error::Parse {
                line,
                message: format!("duplicate cell (lon {lon}, lat {lat}, level {level}) also on line {first}"),
            });
        }
        cells.insert((i, level), (temperature, flag, line));
    }
    if cells.is_empty() {
        return Err(Error::Granule("granule file has no rows".into()));
    }

    let mut level_list: Vec<(u32, f64)> = levels.iter().map(|(&k, &(p, _))| (k, p)).collect();
    level_list.sort_by(|a, b| a.1.total_cmp(&b.1));
    let n_s = locs.len();
    let n_p = level_list.len();
    if cells.len() != n_s * n_p {
        let (i, (lon, lat)) = locs
            .iter()
            .enumerate()
            .find(|(i, _)| level_list.iter().any(|(l, _)| !cells.contains_key(&(*i, *l))))
            .map(|(i, l)| (i, *l))
            .unwrap_or((0, (f64::NAN, f64::NAN)));
        let missing = level_list
            .iter()
            .find(|(l, _)| !cells.contains_key(&(i, *l)))
            .map(|(l, _)| *l)
            .unwrap_or(0);
        return Err(Error::Granule(format!(
            "incomplete grid: {} rows for {n_s} locations x {n_p} levels; no row for (lon {lon}, lat {lat}, level {missing})",
            cells.len()
        )));
    }
    let mut temperature = Vec::with_capacity(n_s * n_p);
    let mut flags = Vec::with_capacity(n_s * n_p);
    for i in 0..n_s {
        for (l, _) in &level_list {
            let (t, f, _) = cells[&(i, *l)];
            temperature.push(t);
            flags.push(f);
        }
    }
    let (granule, dropped_levels) = Granule::dropping_undefined_levels(
        locs.iter().map(|l| l.0).collect(),
        locs.iter().map(|l| l.1).collect(),
        level_list.iter().map(|l| l.1).collect(),
        level_list.iter().map(|l| l.0).collect(),
        temperature,
        flags,
    )?;
    Ok(LoadedGranule {
        granule,
        dropped_levels,
    })
}

fn opt_f64(x: f64) -> String {
    if x.is_finite() {
        x.to_string()
    } else {
        String::new()
    }
}

/// Writes one row per cell in storage order.
pub fn write_granule(path: &Path, granule: &Granule) -> Result<()> {
    write_atomic(path, |w| {
        writeln!(w, "{}", GRANULE_HEADER.join(","))?;
        let n_p = granule.n_pressure();
        for i in 0..granule.n_spatial() {
            for j in 0..n_p {
                let c = granule.cell(i, j);
                let qf = granule.flags()[c].code().map(|q| q.to_string()).unwrap_or_default();
                writeln!(
                    w,
                    "{},{},{},{},{},{}",
                    granule.lons()[i],
                    granule.lats()[i],
                    granule.level_index()[j],
                    granule.pressures()[j],
                    opt_f64(granule.temperature()[c]),
                    qf
                )?;
            }
        }
        Ok(())
    })
}

fn write_f64s(w: &mut impl Write, xs: &[f64]) -> Result<()> {
    for x in xs {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn read_u64(r: &mut impl Read, what: &str) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)
        .map_err(|_| Error::Format(format!("{what}: truncated header")))?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64s(r: &mut impl Read, n: usize, what: &str) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf)
        .map_err(|_| Error::Format(format!("{what}: truncated data")))?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

/// Writes a chain file and, when `with_latent` is set, its latent sidecar.
///
/// Layout:
///
/// ```text
/// # lvcs-chain v1
/// # model=lvcs
/// # acceptance=theta_L:0.31;theta_H:0.28
/// # latent=fields:2;cells:2700      (or `latent=none`)
/// rho,beta_L[0],...
/// 0.93,250.1,...
/// ```
///
/// The sidecar starts with the 8-byte tag `LVCSLAT1`, then little-endian
/// `u64` sample count, field count and cells per field, then `f64` values
/// ordered sample-major, then field, then cell in granule storage order.
pub fn write_chain<S: ChainRecord>(path: &Path, chain: &ChainOutput<S>, with_latent: bool) -> Result<()> {
    let (n_fields, n_cells) = chain
        .samples
        .first()
        .map(|s| {
            let l = s.latent();
            (l.len(), l.first().map_or(0, |f| f.len()))
        })
        .unwrap_or((0, 0));
    if chain
        .samples
        .iter()
        .any(|s| s.latent().len() != n_fields || s.latent().iter().any(|f| f.len() != n_cells))
    {
        return Err(Error::InvalidArgument("latent fields differ in size between samples".into()));
    }
    let with_latent = with_latent && !chain.samples.is_empty();
    write_atomic(path, |w| {
        writeln!(w, "{CHAIN_MAGIC} {CHAIN_VERSION}")?;
        writeln!(w, "# model={}", S::MODEL)?;
        let acc: Vec<String> = chain.acceptance.iter().map(|(k, v)| format!("{k}:{v}")).collect();
        writeln!(w, "# acceptance={}", acc.join(";"))?;
        if with_latent {
            writeln!(w, "# latent=fields:{n_fields};cells:{n_cells}")?;
        } else {
            writeln!(w, "# latent=none")?;
        }
        if let Some(first) = chain.samples.first() {
            writeln!(w, "{}", first.scalar_names().join(","))?;
            for s in &chain.samples {
                let row: Vec<String> = s.scalars().iter().map(|x| x.to_string()).collect();
                writeln!(w, "{}", row.join(","))?;
            }
        }
        Ok(())
    })?;
    let side = latent_path(path);
    if with_latent {
        write_atomic(&side, |w| {
            w.write_all(LATENT_MAGIC)?;
            for n in [chain.samples.len(), n_fields, n_cells] {
                w.write_all(&(n as u64).to_le_bytes())?;
            }
            for s in &chain.samples {
                for f in s.latent() {
                    write_f64s(w, f)?;
                }
            }
            Ok(())
        })?;
    } else if side.exists() {
        fs::remove_file(side)?;
    }
    Ok(())
}

struct ChainHeader {
    model: String,
    acceptance: Vec<(String, f64)>,
    latent: Option<(usize, usize)>,
}

fn parse_chain_header(text: &str) -> Result<(ChainHeader, usize)> {
    let mut lines = text.lines();
    let first = lines.next().unwrap_or("");
    let version = first
        .strip_prefix(CHAIN_MAGIC)
        .map(str::trim)
        .ok_or_else(|| Error::Format("not a chain file: missing '# lvcs-chain' header".into()))?;
    if version != CHAIN_VERSION {
        return Err(Error::Format(format!(
            "unsupported chain version {version:?} (expected {CHAIN_VERSION})"
        )));
    }
    let mut model = None;
    let mut acceptance = Vec::new();
    let mut latent = None;
    let mut used = 1;
    for line in lines {
        let Some(meta) = line.strip_prefix("# ") else { break };
        used += 1;
        let (key, value) = meta
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("malformed chain header line {used}: {line:?}")))?;
        match key {
            "model" => model = Some(value.to_string()),
            "acceptance" => {
                for item in value.split(';').filter(|s| !s.is_empty()) {
                    let (k, v) = item
                        .split_once(':')
                        .ok_or_else(|| Error::Format(format!("malformed acceptance entry {item:?}")))?;
                    let v = v
                        .parse()
                        .map_err(|_| Error::Format(format!("malformed acceptance rate {v:?}")))?;
                    acceptance.push((k.to_string(), v));
                }
            }
            "latent" if value == "none" => latent = None,
            "latent" => {
                let parse = |part: Option<&str>, tag: &str| -> Result<usize> {
                    part.and_then(|p| p.strip_prefix(tag))
                        .and_then(|n| n.parse().ok())
                        .ok_or_else(|| Error::Format(format!("malformed latent header {value:?}")))
                };
                let mut parts = value.split(';');
                latent = Some((parse(parts.next(), "fields:")?, parse(parts.next(), "cells:")?));
            }
            _ => return Err(Error::Format(format!("unknown chain header key {key:?}"))),
        }
    }
    let model = model.ok_or_else(|| Error::Format("chain header lacks a model line".into()))?;
    Ok((
        ChainHeader {
            model,
            acceptance,
            latent,
        },
        used,
    ))
}

/// Model tag of a chain file, without reading its samples.
pub fn chain_model(path: &Path) -> Result<String> {
    let text = fs::read_to_string(path).map_err(Error::file(path))?;
    Ok(parse_chain_header(&text)?.0.model)
}

pub fn read_chain<S: ChainRecord>(path: &Path) -> Result<ChainOutput<S>> {
    let text = fs::read_to_string(path).map_err(Error::file(path))?;
    let (header, used) = parse_chain_header(&text)?;
    if header.model != S::MODEL {
        return Err(Error::Format(format!(
            "chain holds model {:?}, expected {:?}",
            header.model,
            S::MODEL
        )));
    }
    let mut body = text.lines().enumerate().skip(used).filter(|(_, l)| !l.trim().is_empty());
    let Some((_, names_line)) = body.next() else {
        return Ok(ChainOutput::new(Vec::new(), header.acceptance));
    };
    let names: Vec<String> = names_line.split(',').map(|s| s.trim().to_string()).collect();
    let mut rows = Vec::new();
    for (idx, line) in body {
        let vals: Vec<f64> = line
            .split(',')
            .map(|f| parse_f64(f.trim(), "chain value", idx + 1))
            .collect::<Result<_>>()?;
        if vals.len() != names.len() {
            return Err(Error::Parse {
                line: idx + 1,
                message: format!("expected {} values, found {}", names.len(), vals.len()),
            });
        }
        rows.push(vals);
    }

    let mut latent: Vec<Vec<Vec<f64>>> = vec![Vec::new(); rows.len()];
    if let Some((n_fields, n_cells)) = header.latent {
        let side = latent_path(path);
        let mut r = BufReader::new(
            File::open(&side).map_err(|e| Error::Format(format!("latent sidecar {}: {e}", side.display())))?,
        );
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)
            .map_err(|_| Error::Format("latent sidecar: truncated header".into()))?;
        if &magic != LATENT_MAGIC {
            return Err(Error::Format("latent sidecar: bad magic".into()));
        }
        let dims = [
            read_u64(&mut r, "latent sidecar")?,
            read_u64(&mut r, "latent sidecar")?,
            read_u64(&mut r, "latent sidecar")?,
        ];
        if dims != [rows.len() as u64, n_fields as u64, n_cells as u64] {
            return Err(Error::Format(format!(
                "latent sidecar dimensions {dims:?} do not match chain ({}, {n_fields}, {n_cells})",
                rows.len()
            )));
        }
        for fields in latent.iter_mut() {
            for _ in 0..n_fields {
                fields.push(read_f64s(&mut r, n_cells, "latent sidecar")?);
            }
        }
    }
    let samples = rows
        .iter()
        .zip(latent)
        .map(|(row, lat)| S::from_parts(&names, row, lat))
        .collect::<Result<Vec<_>>>()?;
    Ok(ChainOutput::new(samples, header.acceptance))
}

/// Per-parameter diagnostics table written next to a chain.
pub fn write_diagnostics<S: ChainRecord>(path: &Path, chain: &ChainOutput<S>) -> Result<()> {
    write_atomic(path, |w| {
        writeln!(w, "# samples={}", chain.len())?;
        for (k, v) in &chain.acceptance {
            writeln!(w, "# acceptance_{k}={v}")?;
        }
        writeln!(w, "name,mean,sd,ess,mcse")?;
        for d in &chain.diagnostics {
            writeln!(w, "{},{},{},{},{}", d.name, d.mean, d.sd, d.ess, d.mcse())?;
        }
        Ok(())
    })
}

pub const PREDICTION_HEADER: [&str; 9] = [
    "target",
    "lon",
    "lat",
    "pressure_hPa",
    "mean",
    "sd",
    "lower",
    "upper",
    "extrapolated",
];

/// Writes the per-target summary and, if present, a draws sidecar:
/// `LVCSDRW1`, `u64` target count, `u64` draws per target, then `f64`
/// values target-major.
pub fn write_predictions(path: &Path, summary: &PredictiveSummary) -> Result<()> {
    write_atomic(path, |w| {
        writeln!(w, "# interval_level={}", summary.interval_level)?;
        writeln!(w, "{}", PREDICTION_HEADER.join(","))?;
        for (k, t) in summary.targets.iter().enumerate() {
            writeln!(
                w,
                "{k},{},{},{},{},{},{},{},{}",
                t.lon,
                t.lat,
                t.pressure_hpa,
                summary.mean[k],
                summary.sd[k],
                summary.lower[k],
                summary.upper[k],
                u8::from(summary.extrapolated[k])
            )?;
        }
        Ok(())
    })?;
    let side = draws_path(path);
    match &summary.draws {
        Some(draws) => {
            let m = draws.first().map_or(0, Vec::len);
            if draws.iter().any(|d| d.len() != m) {
                return Err(Error::InvalidArgument("draw counts differ between targets".into()));
            }
            write_atomic(&side, |w| {
                w.write_all(DRAWS_MAGIC)?;
                w.write_all(&(draws.len() as u64).to_le_bytes())?;
                w.write_all(&(m as u64).to_le_bytes())?;
                for d in draws {
                    write_f64s(w, d)?;
                }
                Ok(())
            })
        }
        None if side.exists() => Ok(fs::remove_file(side)?),
        None => Ok(()),
    }
}

/// Reads predictions written by [`write_predictions`], loading draws when
/// the sidecar exists.
pub fn read_predictions(path: &Path) -> Result<PredictiveSummary> {
    let text = fs::read_to_string(path).map_err(Error::file(path))?;
    let interval_level = text
        .lines()
        .next()
        .and_then(|l| l.strip_prefix("# interval_level="))
        .ok_or_else(|| Error::Format("prediction file lacks '# interval_level=' header".into()))
        .and_then(|v| {
            v.trim()
                .parse::<f64>()
                .map_err(|_| Error::Format(format!("bad interval level {v:?}")))
        })?;
    let mut rdr = reader(path)?;
    check_header(rdr.headers().map_err(csv_err)?, &PREDICTION_HEADER, 0)?;
    let mut s = PredictiveSummary {
        targets: Vec::new(),
        mean: Vec::new(),
        sd: Vec::new(),
        lower: Vec::new(),
        upper: Vec::new(),
        interval_level,
        extrapolated: Vec::new(),
        draws: None,
    };
    for rec in rdr.records() {
        let rec = rec.map_err(csv_err)?;
        let line = record_line(&rec);
        let f = fields(&rec, 9)?;
        let k: usize = f[0].parse().map_err(|_| Error::Parse {
            line,
            message: format!("bad target id {:?}", f[0]),
        })?;
        if k != s.targets.len() {
            return Err(Error::Parse {
                line,
                message: format!("target ids must run 0, 1, ...; found {k}"),
            });
        }
        let v: Vec<f64> = (1..8)
            .map(|i| parse_f64(f[i], PREDICTION_HEADER[i], line))
            .collect::<Result<_>>()?;
        s.targets.push(Target {
            lon: v[0],
            lat: v[1],
            pressure_hpa: v[2],
        });
        s.mean.push(v[3]);
        s.sd.push(v[4]);
        s.lower.push(v[5]);
        s.upper.push(v[6]);
        s.extrapolated.push(match f[8] {
            "0" => false,
            "1" => true,
            other => {
                return Err(Error::Parse {
                    line,
                    message: format!("extrapolated must be 0 or 1, found {other:?}"),
                })
            }
        });
    }
    let side = draws_path(path);
    if side.exists() {
        let mut r = BufReader::new(File::open(&side).map_err(Error::file(&side))?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)
            .map_err(|_| Error::Format("draws sidecar: truncated header".into()))?;
        if &magic != DRAWS_MAGIC {
            return Err(Error::Format("draws sidecar: bad magic".into()));
        }
        let n = read_u64(&mut r, "draws sidecar")? as usize;
        let m = read_u64(&mut r, "draws sidecar")? as usize;
        if n != s.targets.len() {
            return Err(Error::Format(format!(
                "draws sidecar has {n} targets, prediction file has {}",
                s.targets.len()
            )));
        }
        s.draws = Some((0..n).map(|_| read_f64s(&mut r, m, "draws sidecar")).collect::<Result<_>>()?);
    }
    Ok(s)
}

pub const TRUTH_HEADER: [&str; 5] = ["target", "lon", "lat", "pressure_hPa", "truth_K"];

/// One row of a targets or truth file.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TargetRecord {
    pub target: usize,
    pub location: Target,
    pub truth: Option<f64>,
}

/// Reads a targets file. The `truth_K` column is optional; when present,
/// empty cells mean "unknown".
pub fn read_targets(path: &Path) -> Result<Vec<TargetRecord>> {
    let mut rdr = reader(path)?;
    let headers = rdr.headers().map_err(csv_err)?.clone();
    check_header(&headers, &TRUTH_HEADER, 1)?;
    let n = headers.len();
    let mut out = Vec::new();
    let mut seen: HashMap<usize, usize> = HashMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(csv_err)?;
        let line = record_line(&rec);
        let f = fields(&rec, n)?;
        let target: usize = f[0].parse().map_err(|_| Error::Parse {
            line,
            message: format!("bad target id {:?}", f[0]),
        })?;
        if let Some(first) = seen.insert(target, line) {
            return Err(Error::Parse {
                line,
                message: format!("duplicate target {target}, first on line {first}"),
            });
        }
        let truth = match f.get(4) {
            None | Some(&"") | Some(&"NA") => None,
            Some(s) => Some(parse_f64(s, "truth_K", line)?),
        };
        out.push(TargetRecord {
            target,
            location: Target {
                lon: parse_f64(f[1], "lon", line)?,
                lat: parse_f64(f[2], "lat", line)?,
                pressure_hpa: parse_f64(f[3], "pressure_hPa", line)?,
            },
            truth,
        });
    }
    Ok(out)
}

pub fn write_targets(path: &Path, records: &[TargetRecord]) -> Result<()> {
    write_atomic(path, |w| {
        writeln!(w, "{}", TRUTH_HEADER.join(","))?;
        for r in records {
            writeln!(
                w,
                "{},{},{},{},{}",
                r.target,
                r.location.lon,
                r.location.lat,
                r.location.pressure_hpa,
                r.truth.map(opt_f64).unwrap_or_default()
            )?;
        }
        Ok(())
    })
}

pub const METRICS_HEADER: [&str; 7] = ["scope", "pressure_hPa", "n", "mspe", "crps", "cvg", "alci"];

/// Pooled row first, then one row per pressure. Wall time, when known, is
/// carried as a comment line so the numeric table stays reproducible.
pub fn write_metrics(path: &Path, report: &MetricsReport) -> Result<()> {
    let row = |w: &mut BufWriter<File>, scope: &str, p: String, m: &Metrics| -> Result<()> {
        writeln!(w, "{scope},{p},{},{},{},{},{}", m.n, m.mspe, m.crps, m.cvg, m.alci)?;
        Ok(())
    };
    write_atomic(path, |w| {
        writeln!(w, "# interval_level={}", report.interval_level)?;
        if let Some(t) = report.wall_time_seconds {
            writeln!(w, "# wall_time_seconds={t}")?;
        }
        writeln!(w, "{}", METRICS_HEADER.join(","))?;
        row(w, "pooled", String::new(), &report.pooled)?;
        for l in &report.per_level {
            row(w, "level", l.pressure_hpa.to_string(), &l.metrics)?;
        }
        Ok(())
    })
}
