//! Static HTML review site: one index row per cluster and one detail page per
//! cluster with every member patch.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use image::GrayImage;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::concept::RejectionReason;
use crate::dataset::Pathology;
use crate::error::{Error, Result};
use crate::tcav::{TcavResult, TcavStatus};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassCell {
    pub score: Option<f64>,
    pub p_value: Option<f64>,
    pub status: TcavStatus,
}

impl ClassCell {
    pub fn from_result(r: &TcavResult) -> ClassCell {
        ClassCell { score: r.score, p_value: r.p_value, status: r.status }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterReportEntry {
    pub cluster_id: usize,
    pub size: usize,
    /// Share of all patches, in percent.
    pub percentage: f64,
    pub class_distribution: BTreeMap<Pathology, usize>,
    pub tcav: BTreeMap<Pathology, ClassCell>,
    pub is_concept: bool,
    pub rejection_reason: Option<RejectionReason>,
    /// Patch images relative to the report directory; the first few are used
    /// as thumbnails on the index page.
    pub images: Vec<String>,
    pub members: Vec<String>,
}

impl ClusterReportEntry {
    pub fn detail_page(&self) -> String {
        format!("cluster_{}.html", self.cluster_id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportContext {
    pub total_patches: usize,
    pub chosen_k: usize,
    pub alpha: f64,
    /// Number of significance tests run, with no multiple-comparison
    /// correction applied.
    pub n_tests: usize,
    pub thumbnails: usize,
}

/// Writes a grayscale PNG of an intensity grid in [0, 1].
pub fn write_png(path: &Path, image: &Array2<f32>) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let (h, w) = image.dim();
    let pixels: Vec<u8> = image.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let img = GrayImage::from_raw(w as u32, h as u32, pixels).ok_or_else(|| Error::Image {
        path: path.to_path_buf(),
        message: "buffer size mismatch".into(),
    })?;
    img.save(path).map_err(|e| Error::Image { path: path.to_path_buf(), message: e.to_string() })
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

const STYLE: &str = "body{font-family:sans-serif;margin:2em}\
table{border-collapse:collapse}td,th{border:1px solid #ccc;padding:4px 8px;text-align:right}\
td.l,th.l{text-align:left}.rej{color:#999}.sig{font-weight:bold}\
img{width:64px;height:64px;image-rendering:pixelated;margin:2px}\
.ph{display:inline-block;width:64px;height:64px;background:#eee;margin:2px;font-size:9px}";

fn page(title: &str, body: &str) -> String {
    format!(
        "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>{t}</title><style>{STYLE}</style></head>\n<body>\n<h1>{t}</h1>\n{body}</body></html>\n",
        t = escape(title)
    )
}

fn cell_text(cell: Option<&ClassCell>) -> String {
    match cell {
        None => String::new(),
        Some(c) => match (c.status, c.score) {
            (TcavStatus::Degenerate, _) => "degenerate".into(),
            (TcavStatus::Scored, Some(s)) => format!("<span class=\"sig\">{s:.2}</span>"),
            (_, Some(s)) => format!("{s:.2} (n.s.)"),
            (_, None) => String::new(),
        },
    }
}

fn format_p(p: f64) -> String {
    if p < 1e-3 {
        format!("{p:.1e}")
    } else {
        format!("{p:.3}")
    }
}

fn image_tag(out_dir: &Path, rel: &str) -> String {
    if out_dir.join(rel).is_file() {
        format!("<img src=\"{}\" alt=\"\">", escape(rel))
    } else {
        log::warn!("report image {rel} is missing; rendering a placeholder");
        "<span class=\"ph\">missing</span>".to_string()
    }
}

fn concept_text(e: &ClusterReportEntry) -> String {
    match e.rejection_reason {
        None if e.is_concept => "concept".into(),
        Some(r) => format!("not a concept: {}", r.describe()),
        None => "not a concept".into(),
    }
}

/// Renders `index.html` plus one `cluster_<id>.html` per entry into `out_dir`.
pub fn render_report(entries: &[ClusterReportEntry], ctx: &ReportContext, out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut body = String::new();
    let _ = writeln!(
        body,
        "<p>{} clusters over {} patches (k = {}). {} significance tests at alpha = {}, uncorrected for multiple comparisons.</p>",
        entries.len(),
        ctx.total_patches,
        ctx.chosen_k,
        ctx.n_tests,
        ctx.alpha
    );
    if !entries.is_empty() {
        body.push_str("<table>\n<tr><th>cluster</th><th>size</th><th>%</th>");
        for k in Pathology::ALL {
            let _ = write!(body, "<th>TCAV {k}</th>");
        }
        for k in Pathology::ALL {
            let _ = write!(body, "<th>#{k}</th>");
        }
        body.push_str("<th class=\"l\">status</th><th class=\"l\">patches</th></tr>\n");
        for e in entries {
            let class = if e.is_concept { "" } else { " class=\"rej\"" };
            let _ = write!(
                body,
                "<tr{class}><td><a href=\"{}\">{}</a></td><td>{}</td><td>{:.2}</td>",
                e.detail_page(),
                e.cluster_id,
                e.size,
                e.percentage
            );
            for k in Pathology::ALL {
                let _ = write!(body, "<td>{}</td>", cell_text(e.tcav.get(&k)));
            }
            for k in Pathology::ALL {
                let _ = write!(body, "<td>{}</td>", e.class_distribution.get(&k).copied().unwrap_or(0));
            }
            let _ = write!(body, "<td class=\"l\">{}</td><td class=\"l\">", escape(&concept_text(e)));
            for rel in e.images.iter().take(ctx.thumbnails) {
                body.push_str(&image_tag(out_dir, rel));
            }
            body.push_str("</td></tr>\n");
        }
        body.push_str("</table>\n");
    }
    let index = out_dir.join("index.html");
    std::fs::write(&index, page("Concept clusters", &body)).map_err(|e| Error::io(&index, e))?;

    for e in entries {
        let mut body = format!(
            "<p><a href=\"index.html\">back</a></p>\n<p>{} patches ({:.2}% of all), {}.</p>\n<table>\n<tr><th class=\"l\">class</th><th>patches</th><th>TCAV</th><th>p</th></tr>\n",
            e.size,
            e.percentage,
            escape(&concept_text(e))
        );
        for k in Pathology::ALL {
            let cell = e.tcav.get(&k);
            let p = cell.and_then(|c| c.p_value).map(format_p).unwrap_or_default();
            let _ = writeln!(
                body,
                "<tr><td class=\"l\">{k}</td><td>{}</td><td>{}</td><td>{p}</td></tr>",
                e.class_distribution.get(&k).copied().unwrap_or(0),
                cell_text(cell)
            );
        }
        body.push_str("</table>\n<div>\n");
        for (rel, id) in e.images.iter().zip(&e.members) {
            let tag = image_tag(out_dir, rel).replacen("alt=\"\"", &format!("alt=\"{0}\" title=\"{0}\"", escape(id)), 1);
            body.push_str(&tag);
        }
        body.push_str("\n</div>\n");
        let path = out_dir.join(e.detail_page());
        std::fs::write(&path, page(&format!("Cluster {}", e.cluster_id), &body)).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}
