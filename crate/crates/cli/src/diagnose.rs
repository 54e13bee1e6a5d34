use std::path::PathBuf;

use bayesrake::sampler::{coordinate_diagnostic, CoordinateDiagnostic};
use serde::Serialize;

use crate::error::CliError;
use crate::output::OutputDir;
use crate::{Cli, DiagnoseArgs};

/// Sampler statistic columns that lead every draws file.
const STAT_COLUMNS: [&str; 8] = [
    "chain",
    "draw",
    "lp__",
    "accept_stat",
    "stepsize",
    "treedepth",
    "n_leapfrog",
    "divergent",
];

#[derive(Debug, Serialize)]
pub struct DrawsDiagnostics {
    pub chains: usize,
    pub draws: usize,
    pub divergences: usize,
    pub max_depth_hits: usize,
    pub mean_accept_stat: f64,
    pub n_flagged: usize,
    pub max_rhat: Option<f64>,
    pub min_ess: Option<f64>,
    pub coordinates: Vec<CoordinateDiagnostic>,
}

/// R-hat and ESS for every column of a draws CSV, including derived cell
/// quantities.
pub fn diagnose_csv(
    text: &str,
    source: &str,
    max_depth: usize,
) -> Result<DrawsDiagnostics, CliError> {
    let bad = |msg: String| CliError::parse(std::path::Path::new(source), msg);
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let header = rdr.headers().map_err(|e| bad(e.to_string()))?.clone();
    if header.len() < STAT_COLUMNS.len() || header.iter().zip(STAT_COLUMNS).any(|(h, s)| h != s) {
        return Err(bad("not a draws file (unexpected leading columns)".into()));
    }
    let width = header.len();
    let mut chain_rows: Vec<Vec<Vec<f64>>> = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let row: Vec<f64> = rec
            .iter()
            .map(|v| v.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|_| bad(format!("line {}: non-numeric value", i + 2)))?;
        let chain = row[0] as usize;
        if chain >= chain_rows.len() {
            chain_rows.resize(chain + 1, Vec::new());
        }
        chain_rows[chain].push(row);
    }
    if chain_rows.is_empty() || chain_rows.iter().any(Vec::is_empty) {
        return Err(bad("no draws, or a chain without draws".into()));
    }
    let n_per = chain_rows.iter().map(Vec::len).min().unwrap_or(0);
    let all = || chain_rows.iter().flatten();
    let draws = all().count();
    let coordinates: Vec<CoordinateDiagnostic> = (STAT_COLUMNS.len()..width)
        .map(|k| {
            let cols: Vec<Vec<f64>> = chain_rows
                .iter()
                .map(|c| c[..n_per].iter().map(|r| r[k]).collect())
                .collect();
            let refs: Vec<&[f64]> = cols.iter().map(Vec::as_slice).collect();
            coordinate_diagnostic(&header[k], &refs)
        })
        .collect();
    Ok(DrawsDiagnostics {
        chains: chain_rows.len(),
        draws,
        divergences: all().filter(|r| r[7] != 0.0).count(),
        max_depth_hits: all().filter(|r| r[5] as usize >= max_depth).count(),
        mean_accept_stat: all().map(|r| r[3]).sum::<f64>() / draws as f64,
        n_flagged: coordinates.iter().filter(|c| c.flagged).count(),
        max_rhat: coordinates
            .iter()
            .filter_map(|c| c.rhat)
            .filter(|r| !r.is_nan())
            .reduce(f64::max),
        min_ess: coordinates.iter().filter_map(|c| c.ess).reduce(f64::min),
        coordinates,
    })
}

pub fn diagnose(cli: &Cli, args: &DiagnoseArgs) -> Result<Vec<PathBuf>, CliError> {
    let text = std::fs::read_to_string(&args.draws).map_err(|e| CliError::io(&args.draws, e))?;
    let d = diagnose_csv(&text, &args.draws.display().to_string(), args.max_depth)?;
    println!(
        "{} chains x {} draws: {} divergences, {} at max tree depth, mean accept {:.3}",
        d.chains,
        d.draws / d.chains,
        d.divergences,
        d.max_depth_hits,
        d.mean_accept_stat
    );
    println!(
        "max R-hat {}, min ESS {}, {} of {} coordinates flagged",
        d.max_rhat.map_or("n/a".into(), |r| format!("{r:.3}")),
        d.min_ess.map_or("n/a".into(), |e| format!("{e:.0}")),
        d.n_flagged,
        d.coordinates.len()
    );
    for c in d.coordinates.iter().filter(|c| c.flagged) {
        println!("  flagged {}: R-hat {:?}, ESS {:?}", c.name, c.rhat, c.ess);
    }
    let Some(dir) = &cli.out else {
        return Ok(Vec::new());
    };
    let mut out = OutputDir::create(dir)?;
    out.write_json("diagnostics.json", &d)?;
    out.finish(
        "diagnose",
        &serde_json::json!({ "draws": args.draws, "max_depth": args.max_depth }),
        &[&args.draws],
        serde_json::json!({ "n_flagged": d.n_flagged }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_files_without_sampler_columns() {
        assert!(diagnose_csv("a,b\n1,2\n", "x.csv", 10).is_err());
    }

    #[test]
    fn counts_divergences_and_depth_hits() {
        let mut text =
            String::from("chain,draw,lp__,accept_stat,stepsize,treedepth,n_leapfrog,divergent,x\n");
        for c in 0..2 {
            for i in 0..50 {
                let x = ((i * 7 + c * 3) % 11) as f64;
                let depth = if i == 0 { 10 } else { 3 };
                let div = u8::from(i == 1 && c == 1);
                text.push_str(&format!("{c},{i},-1,0.9,0.5,{depth},7,{div},{x}\n"));
            }
        }
        let d = diagnose_csv(&text, "x.csv", 10).unwrap();
        assert_eq!((d.chains, d.draws), (2, 100));
        assert_eq!(d.divergences, 1);
        assert_eq!(d.max_depth_hits, 2);
        assert_eq!(d.coordinates.len(), 1);
        assert!((d.mean_accept_stat - 0.9).abs() < 1e-12);
    }
}
