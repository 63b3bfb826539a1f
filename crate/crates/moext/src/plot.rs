//! Minimal SVG output for loss curves and confusion matrices.

use std::path::Path;

use crate::error::Result;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 50.0;

const SERIES_COLORS: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b",
];

/// Plot one or more equally-long series as polylines over their index.
pub fn plot_series(path: &Path, title: &str, series: &[(&str, Vec<f64>)]) -> Result<()> {
    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" \
         viewBox=\"0 0 {WIDTH} {HEIGHT}\">\n\
         <rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" \
         font-size=\"16\">{}</text>\n",
        WIDTH / 2.0,
        xml_escape(title)
    ));

    let finite: Vec<f64> = series
        .iter()
        .flat_map(|(_, v)| v.iter().copied())
        .filter(|v| v.is_finite())
        .collect();
    let (lo, hi) = finite
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let (lo, hi) = if finite.is_empty() || lo == hi {
        (lo.min(0.0) - 1.0, hi.max(0.0) + 1.0)
    } else {
        (lo, hi)
    };
    let n = series.iter().map(|(_, v)| v.len()).max().unwrap_or(0);

    // Axes.
    svg.push_str(&format!(
        "<line x1=\"{m}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <line x1=\"{m}\" y1=\"{t}\" x2=\"{m}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <text x=\"{m}\" y=\"{tb}\" font-family=\"sans-serif\" font-size=\"11\">{hi:.4}</text>\n\
         <text x=\"{m}\" y=\"{bb}\" font-family=\"sans-serif\" font-size=\"11\">{lo:.4}</text>\n",
        m = MARGIN,
        r = WIDTH - MARGIN,
        t = MARGIN,
        b = HEIGHT - MARGIN,
        tb = MARGIN - 6.0,
        bb = HEIGHT - MARGIN + 14.0,
    ));

    for (k, (label, values)) in series.iter().enumerate() {
        let color = SERIES_COLORS[k % SERIES_COLORS.len()];
        let points: Vec<String> = values
            .iter()
            .enumerate()
            .filter(|(_, v)| v.is_finite())
            .map(|(i, &v)| {
                let x = MARGIN
                    + (WIDTH - 2.0 * MARGIN) * (i as f64) / ((n.max(2) - 1) as f64);
                let y = HEIGHT - MARGIN - (HEIGHT - 2.0 * MARGIN) * (v - lo) / (hi - lo);
                format!("{x:.2},{y:.2}")
            })
            .collect();
        svg.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n\
             <text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\" \
             fill=\"{color}\">{}</text>\n",
            points.join(" "),
            WIDTH - MARGIN + 4.0,
            MARGIN + 16.0 * (k as f64 + 1.0),
            xml_escape(label)
        ));
    }
    svg.push_str("</svg>\n");
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, svg)?;
    Ok(())
}

/// Render a confusion matrix as a shaded grid with counts.
pub fn plot_confusion(path: &Path, class_names: &[String], counts: &[Vec<u64>]) -> Result<()> {
    let n = class_names.len().max(1);
    let cell = 56.0;
    let label_w = 110.0;
    let w = label_w + cell * n as f64 + 20.0;
    let h = label_w + cell * n as f64 + 20.0;
    let max_count = counts
        .iter()
        .flat_map(|r| r.iter())
        .copied()
        .max()
        .unwrap_or(0)
        .max(1) as f64;

    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" \
         viewBox=\"0 0 {w} {h}\">\n<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n"
    );
    for (i, row) in counts.iter().enumerate() {
        for (j, &c) in row.iter().enumerate() {
            let x = label_w + cell * j as f64;
            let y = label_w + cell * i as f64;
            let shade = 255.0 - 195.0 * (c as f64 / max_count);
            let text_fill = if c as f64 / max_count > 0.6 { "white" } else { "black" };
            svg.push_str(&format!(
                "<rect x=\"{x}\" y=\"{y}\" width=\"{cell}\" height=\"{cell}\" \
                 fill=\"rgb({s},{s},255)\" stroke=\"#999\"/>\n\
                 <text x=\"{cx}\" y=\"{cy}\" text-anchor=\"middle\" font-family=\"sans-serif\" \
                 font-size=\"14\" fill=\"{text_fill}\">{c}</text>\n",
                s = shade as u32,
                cx = x + cell / 2.0,
                cy = y + cell / 2.0 + 5.0,
            ));
        }
    }
    for (i, name) in class_names.iter().enumerate() {
        let y = label_w + cell * i as f64 + cell / 2.0 + 4.0;
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{y}\" text-anchor=\"end\" font-family=\"sans-serif\" \
             font-size=\"12\">{}</text>\n",
            label_w - 6.0,
            xml_escape(name)
        ));
        let x = label_w + cell * i as f64 + cell / 2.0;
        svg.push_str(&format!(
            "<text x=\"{x}\" y=\"{}\" text-anchor=\"start\" font-family=\"sans-serif\" \
             font-size=\"12\" transform=\"rotate(-60 {x} {ly})\">{}</text>\n",
            label_w - 8.0,
            xml_escape(name),
            ly = label_w - 8.0,
        ));
    }
    svg.push_str("</svg>\n");
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, svg)?;
    Ok(())
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn series_plot_writes_valid_svg() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("loss.svg");
        plot_series(
            &path,
            "pretrain loss",
            &[("total", vec![3.0, 2.0, 1.5]), ("l_re", vec![1.0, 0.7, 0.5])],
        )
        .unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("<svg"));
        assert!(text.contains("polyline"));
        assert!(text.trim_end().ends_with("</svg>"));
    }

    #[test]
    fn confusion_plot_includes_counts_and_labels() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cm.svg");
        plot_confusion(
            &path,
            &["negative".to_string(), "positive".to_string()],
            &[vec![5, 1], vec![0, 4]],
        )
        .unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains(">5<"));
        assert!(text.contains("negative"));
    }

    #[test]
    fn constant_series_does_not_divide_by_zero() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("flat.svg");
        plot_series(&path, "flat", &[("c", vec![2.0, 2.0, 2.0])]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(!text.contains("NaN"));
    }
}
