//! Run artifacts: structured logs, charts, tables, and imagery.
//!
//! Training writes JSONL (one self-describing record per epoch); this module
//! renders those logs into SVG line charts and CSV tables, and packs
//! grayscale panels (enhancement stages, masks, reconstructions) into PNG
//! grids. Everything is plain files — a run directory is inspectable with
//! nothing but a text editor and a browser.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{RegionSummary, SubjectReport};

/// Append-only JSON-lines writer; every record is flushed so partial runs
/// still leave a readable log.
pub struct JsonlLogger {
    w: BufWriter<File>,
    path: PathBuf,
}

impl JsonlLogger {
    pub fn create(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(Self {
            w: BufWriter::new(file),
            path: path.to_owned(),
        })
    }

    pub fn append<T: Serialize>(&mut self, record: &T) -> Result<()> {
        let line =
            serde_json::to_string(record).map_err(|e| Error::Data(format!("log encode: {e}")))?;
        self.w
            .write_all(line.as_bytes())
            .and_then(|()| self.w.write_all(b"\n"))
            .and_then(|()| self.w.flush())
            .map_err(|e| Error::io(&self.path, e))
    }
}

/// Read a JSONL file into loosely typed records.
pub fn read_jsonl(path: &Path) -> Result<Vec<serde_json::Value>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l)
                .map_err(|e| Error::Data(format!("{}: bad log line: {e}", path.display())))
        })
        .collect()
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Data(format!("json encode: {e}")))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Data(format!("{}: malformed json: {e}", path.display())))
}

/// The eval artifact: per-subject metrics plus cohort means.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalArtifact {
    pub subjects: Vec<SubjectReport>,
    pub summary: Vec<RegionSummary>,
}

/// One plotted curve; x is the index (epoch or sweep step).
#[derive(Debug, Clone)]
pub struct Series {
    pub name: String,
    pub values: Vec<f64>,
}

impl Series {
    pub fn new(name: &str, values: Vec<f64>) -> Self {
        Self {
            name: name.to_owned(),
            values,
        }
    }
}

const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b",
];

/// Render a multi-series line chart as a standalone SVG string. Non-finite
/// samples are skipped; series with no finite sample are dropped. `marker`
/// draws a labeled dashed vertical rule at the given x index, e.g. to show
/// where the training phase switches.
pub fn line_chart_svg(
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[Series],
    marker: Option<(usize, &str)>,
) -> String {
    let (width, height) = (720.0, 420.0);
    let (ml, mr, mt, mb) = (64.0, 20.0, 36.0, 52.0);
    let (pw, ph) = (width - ml - mr, height - mt - mb);

    let finite: Vec<&Series> = series
        .iter()
        .filter(|s| s.values.iter().any(|v| v.is_finite()))
        .collect();
    let n_x = finite.iter().map(|s| s.values.len()).max().unwrap_or(0);
    let mut y_min = f64::INFINITY;
    let mut y_max = f64::NEG_INFINITY;
    for s in &finite {
        for &v in s.values.iter().filter(|v| v.is_finite()) {
            y_min = y_min.min(v);
            y_max = y_max.max(v);
        }
    }
    if !y_min.is_finite() {
        y_min = 0.0;
        y_max = 1.0;
    }
    if (y_max - y_min).abs() < 1e-12 {
        let pad = y_max.abs().max(1.0) * 0.1;
        y_min -= pad;
        y_max += pad;
    }
    let x_span = (n_x.max(2) - 1) as f64;
    let x_of = |i: usize| ml + pw * i as f64 / x_span;
    let y_of = |v: f64| mt + ph * (1.0 - (v - y_min) / (y_max - y_min));

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {width} {height}\" \
         font-family=\"sans-serif\" font-size=\"12\">\n\
         <rect width=\"{width}\" height=\"{height}\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"15\">{title}</text>\n",
        width / 2.0
    ));
    // Axes.
    svg.push_str(&format!(
        "<line x1=\"{ml}\" y1=\"{mt}\" x2=\"{ml}\" y2=\"{}\" stroke=\"black\"/>\n\
         <line x1=\"{ml}\" y1=\"{0}\" x2=\"{}\" y2=\"{0}\" stroke=\"black\"/>\n",
        mt + ph,
        width - mr
    ));
    // Y ticks.
    for k in 0..=4 {
        let v = y_min + (y_max - y_min) * k as f64 / 4.0;
        let y = y_of(v);
        svg.push_str(&format!(
            "<line x1=\"{}\" y1=\"{y}\" x2=\"{ml}\" y2=\"{y}\" stroke=\"black\"/>\n\
             <text x=\"{}\" y=\"{}\" text-anchor=\"end\">{v:.3}</text>\n",
            ml - 4.0,
            ml - 8.0,
            y + 4.0
        ));
    }
    // X ticks at up to 8 integer positions.
    if n_x > 0 {
        let step = (n_x.max(2) - 1).div_ceil(7).max(1);
        let mut i = 0;
        while i < n_x {
            let x = x_of(i);
            svg.push_str(&format!(
                "<line x1=\"{x}\" y1=\"{top}\" x2=\"{x}\" y2=\"{tick}\" stroke=\"black\"/>\n\
                 <text x=\"{x}\" y=\"{label}\" text-anchor=\"middle\">{i}</text>\n",
                top = mt + ph,
                tick = mt + ph + 4.0,
                label = mt + ph + 18.0
            ));
            i += step;
        }
    }
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{x_label}</text>\n\
         <text x=\"16\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {})\">{y_label}</text>\n",
        ml + pw / 2.0,
        height - 12.0,
        mt + ph / 2.0,
        mt + ph / 2.0
    ));
    // Marker: dashed rule with its label rotated along the line.
    if let Some((i, label)) = marker {
        if i < n_x {
            let x = x_of(i);
            svg.push_str(&format!(
                "<line x1=\"{x}\" y1=\"{mt}\" x2=\"{x}\" y2=\"{}\" stroke=\"#555555\" \
                 stroke-dasharray=\"5 4\"/>\n\
                 <text x=\"{}\" y=\"{}\" fill=\"#555555\">{label}</text>\n",
                mt + ph,
                x + 4.0,
                mt + 12.0
            ));
        }
    }
    // Curves and legend.
    for (si, s) in finite.iter().enumerate() {
        let color = PALETTE[si % PALETTE.len()];
        let points: Vec<String> = s
            .values
            .iter()
            .enumerate()
            .filter(|(_, v)| v.is_finite())
            .map(|(i, &v)| format!("{:.2},{:.2}", x_of(i), y_of(v)))
            .collect();
        svg.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
            points.join(" ")
        ));
        let ly = mt + 14.0 * si as f64 + 6.0;
        svg.push_str(&format!(
            "<rect x=\"{}\" y=\"{}\" width=\"10\" height=\"6\" fill=\"{color}\"/>\n\
             <text x=\"{}\" y=\"{}\">{}</text>\n",
            width - mr - 140.0,
            ly - 5.0,
            width - mr - 126.0,
            ly + 1.0,
            s.name
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

fn csv_quote(field: &str) -> String {
    if field.contains([',', '"', '\n']) {
        format!("\"{}\"", field.replace('"', "\"\""))
    } else {
        field.to_owned()
    }
}

pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut out = String::new();
    out.push_str(&header.iter().map(|h| csv_quote(h)).collect::<Vec<_>>().join(","));
    out.push('\n');
    for row in rows {
        out.push_str(&row.iter().map(|f| csv_quote(f)).collect::<Vec<_>>().join(","));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn write_text(path: &Path, content: &str) -> Result<()> {
    fs::write(path, content).map_err(|e| Error::io(path, e))
}

/// Pack equally sized grayscale panels (values clamped to [0, 1]) into a
/// PNG grid with 2-pixel separators, `cols` panels per row.
pub fn save_gray_grid(path: &Path, panels: &[Array2<f64>], cols: usize) -> Result<()> {
    let first = panels
        .first()
        .ok_or_else(|| Error::Data("no panels to render".into()))?;
    let (h, w) = first.dim();
    if panels.iter().any(|p| p.dim() != (h, w)) {
        return Err(Error::Data("panels differ in shape".into()));
    }
    let cols = cols.max(1).min(panels.len());
    let rows = panels.len().div_ceil(cols);
    const SEP: usize = 2;
    let out_w = cols * w + (cols - 1) * SEP;
    let out_h = rows * h + (rows - 1) * SEP;
    let mut img = image::GrayImage::from_pixel(out_w as u32, out_h as u32, image::Luma([32u8]));
    for (i, panel) in panels.iter().enumerate() {
        let (gr, gc) = (i / cols, i % cols);
        let (oy, ox) = (gr * (h + SEP), gc * (w + SEP));
        for ((r, c), &v) in panel.indexed_iter() {
            let byte = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            img.put_pixel((ox + c) as u32, (oy + r) as u32, image::Luma([byte]));
        }
    }
    img.save(path)
        .map_err(|e| Error::Data(format!("{}: png encode: {e}", path.display())))
}

fn f(v: &serde_json::Value, key: &str) -> f64 {
    v.get(key).and_then(serde_json::Value::as_f64).unwrap_or(f64::NAN)
}

/// Everything a finished run directory may contain, what the report renders
/// from it, and whether its absence is fatal.
const RUN_ARTIFACTS: [(&str, &str, bool); 5] = [
    ("train_log.jsonl", "loss curves, weight curves, validation Dice curve", true),
    ("config.toml", "resolved configuration; seeds the enhancement grid", false),
    ("pretrain_log.jsonl", "inpainting pretraining curves", false),
    ("eval.json", "per-subject metrics and region summary tables", false),
    ("sweep.json", "slice-level detection table across thresholds", false),
];

/// Names of the run artifacts (required or optional) absent from `run_dir`.
pub fn missing_artifacts(run_dir: &Path) -> Vec<&'static str> {
    RUN_ARTIFACTS
        .iter()
        .filter(|(file, _, _)| !run_dir.join(file).exists())
        .map(|(file, _, _)| *file)
        .collect()
}

/// Render every chart and table a run directory supports into
/// `<run_dir>/report/`, returning the files written. A run missing required
/// artifacts is rejected with a listing of everything absent; missing
/// optional artifacts are listed in the generated index instead. All outputs
/// are deterministic functions of the run artifacts, so re-running is
/// byte-idempotent.
pub fn generate_report(run_dir: &Path) -> Result<Vec<PathBuf>> {
    let absent = missing_artifacts(run_dir);
    if RUN_ARTIFACTS.iter().any(|(file, _, required)| *required && absent.contains(file)) {
        let listing: Vec<String> = RUN_ARTIFACTS
            .iter()
            .filter(|(file, _, _)| absent.contains(file))
            .map(|(file, purpose, required)| {
                let kind = if *required { "required" } else { "optional" };
                format!("  {file} ({kind}) — feeds {purpose}")
            })
            .collect();
        return Err(Error::Data(format!(
            "{}: incomplete run, missing artifacts:\n{}",
            run_dir.display(),
            listing.join("\n")
        )));
    }

    let out_dir = run_dir.join("report");
    fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
    let mut written = Vec::new();
    let records = read_jsonl(&run_dir.join("train_log.jsonl"))?;

    // The first adversarial-phase epoch, marked on every training chart.
    let phase_marker = records
        .iter()
        .position(|r| r.get("phase").and_then(serde_json::Value::as_u64) == Some(2));
    let marker = phase_marker.map(|i| (i, "phase 2"));

    let pull = |key: &str| -> Vec<f64> { records.iter().map(|r| f(r, key)).collect() };
    let losses = vec![
        Series::new("total", pull("total")),
        Series::new("ce", pull("ce")),
        Series::new("dice", pull("dice")),
        Series::new("sparsity", pull("sparsity")),
        Series::new("adv", pull("adv")),
        Series::new("size", pull("size")),
    ];
    let path = out_dir.join("loss_curves.svg");
    write_text(&path, &line_chart_svg("Training losses", "epoch", "loss", &losses, marker))?;
    written.push(path);

    let weight_series: Vec<Series> = ["w_seg", "w_sparsity", "w_adv", "w_size"]
        .iter()
        .map(|k| Series::new(k, pull(k)))
        .collect();
    let path = out_dir.join("loss_weights.svg");
    write_text(
        &path,
        &line_chart_svg("Dynamic loss weights", "epoch", "weight", &weight_series, marker),
    )?;
    written.push(path);

    let path = out_dir.join("val_dice.svg");
    write_text(
        &path,
        &line_chart_svg(
            "Validation whole-tumor soft Dice",
            "epoch",
            "dice",
            &[Series::new("val_dice", pull("val_dice"))],
            marker,
        ),
    )?;
    written.push(path);

    let mut index = String::from("# Run report\n\n## Artifacts\n\n");
    index.push_str("- loss_curves.svg — per-term training losses\n");
    index.push_str("- loss_weights.svg — dynamic weights per epoch\n");
    index.push_str("- val_dice.svg — validation whole-tumor soft Dice\n");

    if run_dir.join("pretrain_log.jsonl").exists() {
        let pre = read_jsonl(&run_dir.join("pretrain_log.jsonl"))?;
        let pull = |key: &str| -> Vec<f64> { pre.iter().map(|r| f(r, key)).collect() };
        let series = vec![
            Series::new("recon", pull("recon")),
            Series::new("d_gan", pull("d_gan")),
            Series::new("g_gan", pull("g_gan")),
            Series::new("val_recon", pull("val_recon")),
        ];
        let path = out_dir.join("pretrain_curves.svg");
        write_text(
            &path,
            &line_chart_svg("Inpainting pretraining", "epoch", "loss", &series, None),
        )?;
        written.push(path);
        index.push_str("- pretrain_curves.svg — generator/discriminator pretraining\n");
    }

    if run_dir.join("eval.json").exists() {
        let eval: EvalArtifact = read_json(&run_dir.join("eval.json"))?;
        let mut rows = Vec::new();
        for s in &eval.subjects {
            for m in &s.regions {
                rows.push(vec![
                    s.subject_id.clone(),
                    m.region.as_str().to_owned(),
                    format!("{:.4}", m.dice),
                    format!("{:.3}", m.hd95_mm),
                    format!("{:.4}", m.lesion_wise_dice),
                    format!("{:.4}", m.lesion_wise_sensitivity),
                    format!("{:.4}", m.sensitivity),
                    format!("{:.4}", m.specificity),
                    format!("{:.3}", m.hausdorff_mm),
                    m.true_lesions.to_string(),
                    m.pred_lesions.to_string(),
                    m.matched_pairs.len().to_string(),
                ]);
            }
        }
        let path = out_dir.join("metrics.csv");
        write_csv(
            &path,
            &[
                "subject", "region", "dice", "hd95_mm", "lesion_wise_dice",
                "lesion_wise_sensitivity", "sensitivity", "specificity", "hausdorff_mm",
                "true_lesions", "pred_lesions", "matched_pairs",
            ],
            &rows,
        )?;
        written.push(path);

        let rows: Vec<Vec<String>> = eval
            .summary
            .iter()
            .map(|s| {
                vec![
                    s.region.as_str().to_owned(),
                    s.subjects.to_string(),
                    format!("{:.4}", s.mean_dice),
                    format!("{:.3}", s.mean_hd95_mm),
                    format!("{:.4}", s.mean_lesion_wise_dice),
                    format!("{:.4}", s.mean_lesion_wise_sensitivity),
                    format!("{:.4}", s.mean_sensitivity),
                    format!("{:.4}", s.mean_specificity),
                    format!("{:.3}", s.mean_hausdorff_mm),
                ]
            })
            .collect();
        let path = out_dir.join("summary.csv");
        write_csv(
            &path,
            &[
                "region", "subjects", "mean_dice", "mean_hd95_mm", "mean_lesion_wise_dice",
                "mean_lesion_wise_sensitivity", "mean_sensitivity", "mean_specificity",
                "mean_hausdorff_mm",
            ],
            &rows,
        )?;
        written.push(path);
        index.push_str("- metrics.csv — per-subject, per-region metrics\n");
        index.push_str("- summary.csv — cohort means per region (Dice / HD95 / lesion-wise Dice)\n");
        for s in &eval.summary {
            index.push_str(&format!(
                "\n**{}**: dice {:.3}, hd95 {:.2} mm, lesion-wise {:.3}, sensitivity {:.3}, specificity {:.3}\n",
                s.region.as_str(),
                s.mean_dice,
                s.mean_hd95_mm,
                s.mean_lesion_wise_dice,
                s.mean_sensitivity,
                s.mean_specificity
            ));
        }
    }

    if run_dir.join("sweep.json").exists() {
        let sweep: crate::train::SweepReport = read_json(&run_dir.join("sweep.json"))?;
        let csv_rows: Vec<Vec<String>> = sweep
            .rows
            .iter()
            .map(|r| {
                vec![
                    format!("{:.3}", r.threshold),
                    format!("{:.4}", r.accuracy),
                    format!("{:.4}", r.sensitivity),
                    r.true_positives.to_string(),
                    r.false_negatives.to_string(),
                    r.false_positives.to_string(),
                ]
            })
            .collect();
        let path = out_dir.join("sweep.csv");
        write_csv(
            &path,
            &["threshold", "accuracy", "sensitivity", "tp", "fn", "fp"],
            &csv_rows,
        )?;
        written.push(path);

        let path = out_dir.join("sweep.svg");
        write_text(
            &path,
            &line_chart_svg(
                "Slice-level detection across thresholds",
                "threshold index",
                "rate",
                &[
                    Series::new("accuracy", sweep.rows.iter().map(|r| r.accuracy).collect()),
                    Series::new(
                        "sensitivity",
                        sweep.rows.iter().map(|r| r.sensitivity).collect(),
                    ),
                ],
                None,
            ),
        )?;
        written.push(path);

        index.push_str("- sweep.csv / sweep.svg — slice-level detection across thresholds\n");
        index.push_str(&format!(
            "\n## Detection sweep\n\nScores: {} discriminator map, orientation `{:?}`; \
             {} slices, {} with tumor.\n\n",
            if sweep.gated { "edge-gated" } else { "raw" },
            sweep.orientation,
            sweep.total_slices,
            sweep.tumor_slices
        ));
        index.push_str("| threshold | accuracy | sensitivity | TP | FN | FP |\n");
        index.push_str("|---|---|---|---|---|---|\n");
        for r in &sweep.rows {
            index.push_str(&format!(
                "| {:.3} | {:.2}% | {:.2}% | {} | {} | {} |\n",
                r.threshold,
                100.0 * r.accuracy,
                100.0 * r.sensitivity,
                r.true_positives,
                r.false_negatives,
                r.false_positives
            ));
        }
    }

    if run_dir.join("config.toml").exists() {
        let cfg = crate::config::RunConfig::load(&run_dir.join("config.toml"))?;
        let path = out_dir.join("enhancement_grid.png");
        enhancement_grid(&cfg, &path)?;
        written.push(path);
        index.push_str("- enhancement_grid.png — original slice beside each enhancement stage\n");
    }

    if !absent.is_empty() {
        index.push_str("\n## Missing artifacts\n\n");
        for (file, purpose, _) in RUN_ARTIFACTS.iter().filter(|(f, _, _)| absent.contains(f)) {
            index.push_str(&format!("- {file} — would add {purpose}\n"));
        }
    }

    let path = out_dir.join("index.md");
    write_text(&path, &index)?;
    written.push(path);
    Ok(written)
}

/// Side-by-side panel strip: a synthetic FLAIR slice (the one with the most
/// tumor, from a single-subject dataset under the run's own spec) next to
/// the five enhancement stages.
fn enhancement_grid(cfg: &crate::config::RunConfig, path: &Path) -> Result<()> {
    let spec = crate::volume::PhantomSpec {
        n_subjects: 1,
        ..cfg.data.tumor_spec()
    };
    let vol = crate::volume::synth_dataset(&spec, true)?.remove(0);
    let tumor_per_slice: Vec<usize> = (0..vol.labels.dim().0)
        .map(|s| {
            vol.labels
                .index_axis(ndarray::Axis(0), s)
                .iter()
                .filter(|&&l| l != 0)
                .count()
        })
        .collect();
    let sl = tumor_per_slice
        .iter()
        .enumerate()
        .max_by_key(|(_, &n)| n)
        .map_or(0, |(i, _)| i);
    // Modality 3 is the FLAIR-like channel with the strongest edema contrast.
    let raw = vol
        .modalities
        .index_axis(ndarray::Axis(0), 3)
        .index_axis(ndarray::Axis(0), sl)
        .mapv(f64::from);

    let (lo, hi) = raw.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
        (lo.min(v), hi.max(v))
    });
    let span = if hi > lo { hi - lo } else { 1.0 };
    let original = raw.mapv(|v| (v - lo) / span);

    let stages = crate::enhance::enhance_stages(raw.view(), &cfg.enhance.params())?;
    let mut panels = vec![original];
    panels.extend(stages);
    save_gray_grid(path, &panels, panels.len())
}
