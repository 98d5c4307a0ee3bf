//! Renders finished runs into CSV tables and SVG figures.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use super::svg::{self, Series};
use super::{
    cumulative_accuracy_diff, mean_se, median, spearman, token_tvd, winrate, LearningCurve,
    DEFAULT_WINRATE_ALPHA,
};
use crate::corpus::{load_corpus, read_jsonl, CorpusRole, GenerationRecord};
use crate::engine::{iteration_dir, RunManifest, MANIFEST_FILE};
use crate::error::{Error, Result};
use crate::util::sha256_hex;

/// Paths of the files a report wrote, in a fixed order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReportFiles {
    pub files: Vec<PathBuf>,
}

struct LoadedRun {
    dir: PathBuf,
    manifest: RunManifest,
}

impl LoadedRun {
    fn label(&self) -> &str {
        &self.manifest.name
    }

    fn generation(&self) -> Result<Vec<(u64, u32, Vec<GenerationRecord>)>> {
        let mut out = Vec::new();
        for r in &self.manifest.replicates {
            for it in &r.iterations {
                let path = iteration_dir(&self.dir, r.seed, it.t).join("generation.jsonl");
                out.push((r.seed, it.t, read_jsonl(&path)?));
            }
        }
        Ok(out)
    }
}

fn load_runs(run_dirs: &[PathBuf]) -> Result<Vec<LoadedRun>> {
    if run_dirs.is_empty() {
        return Err(Error::validation("a report needs at least one run"));
    }
    let mut runs = Vec::new();
    for dir in run_dirs {
        let manifest = RunManifest::load(&dir.join(MANIFEST_FILE))?;
        for r in &manifest.replicates {
            if (r.iterations.len() as u32) < manifest.iterations {
                return Err(Error::Integrity(format!(
                    "run {} replicate {}: iteration {} is missing",
                    dir.display(),
                    r.seed,
                    r.iterations.len() + 1
                )));
            }
            for it in &r.iterations {
                let idir = iteration_dir(dir, r.seed, it.t);
                for f in ["generation.jsonl", "synthetic.jsonl"] {
                    if !idir.join(f).exists() {
                        return Err(Error::Integrity(format!(
                            "run {} replicate {}: iteration {} artifact {f} is missing",
                            dir.display(),
                            r.seed,
                            it.t
                        )));
                    }
                }
            }
        }
        runs.push(LoadedRun {
            dir: dir.clone(),
            manifest,
        });
    }
    runs.sort_by(|a, b| {
        (
            &a.manifest.dataset_label,
            &a.manifest.name,
            &a.manifest.config_hash,
        )
            .cmp(&(
                &b.manifest.dataset_label,
                &b.manifest.name,
                &b.manifest.config_hash,
            ))
    });
    for w in runs.windows(2) {
        if (&w[0].manifest.dataset_label, &w[0].manifest.name)
            == (&w[1].manifest.dataset_label, &w[1].manifest.name)
        {
            return Err(Error::validation(format!(
                "two runs share dataset {:?} and name {:?}",
                w[0].manifest.dataset_label, w[0].manifest.name
            )));
        }
    }
    Ok(runs)
}

fn csv_bytes(header: &[&str], rows: &[Vec<String>]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| Error::Protocol(e.to_string());
    w.write_record(header).map_err(err)?;
    for r in rows {
        w.write_record(r).map_err(err)?;
    }
    w.into_inner().map_err(|e| Error::Protocol(e.to_string()))
}

fn f6(x: f64) -> String {
    format!("{x:.6}")
}

struct Writer {
    dir: PathBuf,
    prefix: String,
    files: Vec<PathBuf>,
}

impl Writer {
    fn put(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.dir.join(format!("{}-{name}", self.prefix));
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        self.files.push(path);
        Ok(())
    }
}

/// Writes learning curves, the winrate matrix, score-fidelity correlations,
/// cumulative accuracy differences and token TVD per iteration for the
/// given run directories. File names start with a hash of the runs'
/// configurations; re-emitting the same runs gives identical bytes.
pub fn emit_report(run_dirs: &[PathBuf], out_dir: &Path) -> Result<ReportFiles> {
    let runs = load_runs(run_dirs)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut hashes: Vec<&str> = runs
        .iter()
        .map(|r| r.manifest.config_hash.as_str())
        .collect();
    hashes.sort();
    let prefix = sha256_hex(hashes.join("\n").as_bytes())[..8].to_string();
    let mut w = Writer {
        dir: out_dir.to_path_buf(),
        prefix,
        files: Vec::new(),
    };

    // Learning curves.
    let curves: Vec<(String, LearningCurve)> = runs
        .iter()
        .map(|r| {
            Ok((
                r.manifest.dataset_label.clone(),
                r.manifest.learning_curve()?,
            ))
        })
        .collect::<Result<_>>()?;
    let mut rows = Vec::new();
    for (ds, c) in &curves {
        for p in &c.points {
            rows.push(vec![
                ds.clone(),
                c.label.clone(),
                p.n.to_string(),
                f6(p.mean),
                f6(p.std_err),
                p.replicates.to_string(),
            ]);
        }
    }
    w.put(
        "learning_curve.csv",
        &csv_bytes(
            &["dataset", "algorithm", "n", "mean", "std_err", "replicates"],
            &rows,
        )?,
    )?;
    let multi = curves.iter().any(|(d, _)| d != &curves[0].0);
    let series: Vec<Series> = curves
        .iter()
        .map(|(ds, c)| Series {
            label: if multi {
                format!("{ds}/{}", c.label)
            } else {
                c.label.clone()
            },
            points: c.points.iter().map(|p| (p.n as f64, p.mean)).collect(),
            errors: Some(c.points.iter().map(|p| p.std_err).collect()),
        })
        .collect();
    w.put(
        "learning_curve.svg",
        svg::line_chart(
            "Test accuracy",
            "synthetic training samples",
            "accuracy",
            &series,
        )
        .as_bytes(),
    )?;

    // Winrate.
    let mut by_dataset: BTreeMap<String, Vec<LearningCurve>> = BTreeMap::new();
    for (ds, c) in &curves {
        by_dataset.entry(ds.clone()).or_default().push(c.clone());
    }
    let wm = winrate(&by_dataset, DEFAULT_WINRATE_ALPHA)?;
    let means = wm.column_means();
    let mut rows: Vec<Vec<String>> = wm
        .labels
        .iter()
        .zip(&wm.counts)
        .map(|(l, row)| {
            std::iter::once(l.clone())
                .chain(row.iter().map(u32::to_string))
                .collect()
        })
        .collect();
    rows.push(
        std::iter::once("column_mean".to_string())
            .chain(means.iter().map(|m| f6(*m)))
            .collect(),
    );
    let header: Vec<&str> = std::iter::once("algorithm")
        .chain(wm.labels.iter().map(String::as_str))
        .collect();
    w.put("winrate.csv", &csv_bytes(&header, &rows)?)?;
    w.put(
        "winrate.svg",
        svg::heatmap(
            "Pairwise wins (row beats column)",
            &wm.labels,
            &wm.counts,
            &means,
        )
        .as_bytes(),
    )?;

    // Score fidelity between selected exemplars and their children.
    let mut point_rows = Vec::new();
    let mut corr_rows = Vec::new();
    let mut scatter_series = Vec::new();
    let mut all_generation = Vec::new();
    for r in &runs {
        let gens = r.generation()?;
        let mut points = Vec::new();
        let mut medians = Vec::new();
        for (seed, t, recs) in &gens {
            let pairs: Vec<(f64, f64)> = recs
                .iter()
                .filter_map(|g| Some((g.selection_score?, g.child_score?)))
                .collect();
            for (a, b) in &pairs {
                point_rows.push(vec![
                    r.label().to_string(),
                    "point".into(),
                    seed.to_string(),
                    t.to_string(),
                    f6(*a),
                    f6(*b),
                ]);
            }
            let xs: Vec<f64> = pairs.iter().map(|p| p.0).collect();
            let ys: Vec<f64> = pairs.iter().map(|p| p.1).collect();
            if let (Some(mx), Some(my)) = (median(&xs), median(&ys)) {
                point_rows.push(vec![
                    r.label().to_string(),
                    "median".into(),
                    seed.to_string(),
                    t.to_string(),
                    f6(mx),
                    f6(my),
                ]);
                medians.push((mx, my));
            }
            points.extend(pairs);
        }
        for (level, set) in [("point", &points), ("median", &medians)] {
            let xs: Vec<f64> = set.iter().map(|p| p.0).collect();
            let ys: Vec<f64> = set.iter().map(|p| p.1).collect();
            let (rho, p) = match spearman(&xs, &ys) {
                Ok(c) => (f6(c.rho), format!("{:.6e}", c.p_value)),
                Err(_) => (String::new(), String::new()),
            };
            corr_rows.push(vec![
                r.label().to_string(),
                level.into(),
                set.len().to_string(),
                rho,
                p,
            ]);
        }
        scatter_series.push(Series {
            label: r.label().to_string(),
            points,
            errors: None,
        });
        all_generation.push(gens);
    }
    w.put(
        "fidelity.csv",
        &csv_bytes(
            &[
                "algorithm",
                "level",
                "replicate",
                "iteration",
                "original",
                "synthetic",
            ],
            &point_rows,
        )?,
    )?;
    w.put(
        "correlation.csv",
        &csv_bytes(&["algorithm", "level", "n", "rho", "p_value"], &corr_rows)?,
    )?;
    w.put(
        "fidelity.svg",
        svg::scatter(
            "Exemplar vs synthetic score",
            "original score",
            "synthetic score",
            &scatter_series,
        )
        .as_bytes(),
    )?;

    // Cumulative accuracy of random order minus high-to-low score order.
    let mut rows = Vec::new();
    let mut diff_series = Vec::new();
    for (r, gens) in runs.iter().zip(&all_generation) {
        let recs: Vec<(f64, bool)> = gens
            .iter()
            .flat_map(|(_, _, recs)| recs.iter())
            .filter_map(|g| Some((g.selection_score?, g.child_correct?)))
            .collect();
        if recs.is_empty() {
            continue;
        }
        let mut order: Vec<usize> = (0..recs.len()).collect();
        order.sort_by(|&a, &b| recs[b].0.total_cmp(&recs[a].0));
        let correct: Vec<bool> = recs.iter().map(|r| r.1).collect();
        let seed = u64::from_str_radix(&r.manifest.config_hash[..16], 16).unwrap_or(0);
        let diff = cumulative_accuracy_diff(&correct, &order, seed)?;
        let n = diff.len() as f64;
        let mut pts = Vec::new();
        for (k, d) in diff.iter().enumerate() {
            let frac = (k + 1) as f64 / n;
            rows.push(vec![
                r.label().to_string(),
                (k + 1).to_string(),
                f6(frac),
                f6(*d),
            ]);
            pts.push((100.0 * frac, *d));
        }
        diff_series.push(Series {
            label: r.label().to_string(),
            points: pts,
            errors: None,
        });
    }
    w.put(
        "cumulative_diff.csv",
        &csv_bytes(&["algorithm", "k", "fraction", "diff_points"], &rows)?,
    )?;
    w.put(
        "cumulative_diff.svg",
        svg::line_chart(
            "Random minus score-ordered cumulative accuracy",
            "% of synthetic data",
            "difference (points)",
            &diff_series,
        )
        .as_bytes(),
    )?;

    // Token TVD between the seed corpus and each iteration's synthetic set.
    let mut rows = Vec::new();
    for r in &runs {
        let stamp = r.manifest.corpora.get("seed").ok_or_else(|| {
            Error::Integrity(format!("run {} lacks a seed corpus", r.dir.display()))
        })?;
        let seed_corpus = load_corpus(r.dir.join(&stamp.file), CorpusRole::Seed)?;
        for t in 1..=r.manifest.iterations {
            let mut values = Vec::new();
            for rep in &r.manifest.replicates {
                let synth = load_corpus(
                    iteration_dir(&r.dir, rep.seed, t).join("synthetic.jsonl"),
                    CorpusRole::Synthetic,
                )?;
                if !synth.is_empty() {
                    values.push(token_tvd(&seed_corpus, &synth)?);
                }
            }
            if values.is_empty() {
                continue;
            }
            let (m, se) = mean_se(&values);
            rows.push(vec![
                r.label().to_string(),
                t.to_string(),
                f6(m),
                f6(se),
                values.len().to_string(),
            ]);
        }
    }
    w.put(
        "tvd.csv",
        &csv_bytes(
            &[
                "algorithm",
                "iteration",
                "mean_tvd",
                "std_err",
                "replicates",
            ],
            &rows,
        )?,
    )?;

    Ok(ReportFiles { files: w.files })
}
