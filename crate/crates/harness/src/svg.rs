//! A minimal static SVG 1.1 line-plot backend for depth profiles: linear
//! depth on the x axis, log-scaled drift on the y axis, one polyline plus
//! one circle per data point for each series, and a legend.

use std::fmt::Write;

/// One plotted line.
#[derive(Debug, Clone)]
pub struct Series {
    pub label: String,
    /// `(depth, value)` pairs, ascending in depth.
    pub points: Vec<(f64, f64)>,
}

const WIDTH: f64 = 760.0;
const HEIGHT: f64 = 420.0;
const LEFT: f64 = 74.0;
const RIGHT: f64 = 584.0;
const TOP: f64 = 46.0;
const BOTTOM: f64 = 370.0;

/// Values at or below this floor are clamped before the log transform.
const Y_FLOOR: f64 = 1e-6;

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f",
];

fn escape(text: &str) -> String {
    text.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

fn clamp_log10(value: f64) -> f64 {
    value.max(Y_FLOOR).log10()
}

/// Renders series as a standalone SVG document. Series with no points are
/// skipped; an entirely empty plot still renders its frame and title.
pub fn depth_profile_svg(title: &str, y_label: &str, series: &[Series]) -> String {
    let xs: Vec<f64> = series
        .iter()
        .flat_map(|s| s.points.iter().map(|&(x, _)| x))
        .collect();
    let logs: Vec<f64> = series
        .iter()
        .flat_map(|s| s.points.iter().map(|&(_, y)| clamp_log10(y)))
        .collect();

    let (mut x_min, mut x_max) = bounds(&xs, (0.0, 1.0));
    if x_max - x_min < 1e-12 {
        x_min -= 0.05;
        x_max += 0.05;
    }
    let (log_lo, log_hi) = bounds(&logs, (Y_FLOOR.log10(), 0.0));
    let tick_lo = log_lo.floor() as i32;
    let mut tick_hi = log_hi.ceil() as i32;
    if tick_hi == tick_lo {
        tick_hi += 1;
    }

    let x_pos = |x: f64| LEFT + (x - x_min) / (x_max - x_min) * (RIGHT - LEFT);
    let y_pos = move |log_y: f64| {
        BOTTOM - (log_y - tick_lo as f64) / (tick_hi - tick_lo) as f64 * (BOTTOM - TOP)
    };

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    let _ = writeln!(svg, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{:.1}" y="24" font-family="sans-serif" font-size="15" font-weight="bold">{}</text>"#,
        LEFT,
        escape(title)
    );

    // Frame.
    let _ = writeln!(
        svg,
        r##"<rect x="{LEFT}" y="{TOP}" width="{:.1}" height="{:.1}" fill="none" stroke="#333" stroke-width="1"/>"##,
        RIGHT - LEFT,
        BOTTOM - TOP
    );

    // Decade grid lines and y tick labels.
    for decade in tick_lo..=tick_hi {
        let y = y_pos(decade as f64);
        if decade != tick_lo && decade != tick_hi {
            let _ = writeln!(
                svg,
                r##"<line x1="{LEFT}" y1="{y:.1}" x2="{RIGHT}" y2="{y:.1}" stroke="#ddd" stroke-width="1"/>"##
            );
        }
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="11" text-anchor="end">1e{decade}</text>"#,
            LEFT - 8.0,
            y + 4.0
        );
    }

    // X ticks at the data depths (or quarters when there are no data).
    let mut x_ticks: Vec<f64> = if xs.is_empty() {
        vec![0.0, 0.25, 0.5, 0.75, 1.0]
    } else {
        let mut t = xs.clone();
        t.sort_by(|a, b| a.partial_cmp(b).expect("finite depths"));
        t.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
        t
    };
    if x_ticks.len() > 12 {
        // Too dense to label; fall back to five even ticks.
        x_ticks = (0..5)
            .map(|i| x_min + (x_max - x_min) * i as f64 / 4.0)
            .collect();
    }
    for &tick in &x_ticks {
        let x = x_pos(tick);
        let _ = writeln!(
            svg,
            r##"<line x1="{x:.1}" y1="{BOTTOM}" x2="{x:.1}" y2="{:.1}" stroke="#333" stroke-width="1"/>"##,
            BOTTOM + 5.0
        );
        let _ = writeln!(
            svg,
            r#"<text x="{x:.1}" y="{:.1}" font-family="sans-serif" font-size="11" text-anchor="middle">{tick:.2}</text>"#,
            BOTTOM + 18.0
        );
    }

    // Axis labels.
    let _ = writeln!(
        svg,
        r#"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="12" text-anchor="middle">relative depth</text>"#,
        (LEFT + RIGHT) / 2.0,
        BOTTOM + 38.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="18" y="{:.1}" font-family="sans-serif" font-size="12" text-anchor="middle" transform="rotate(-90 18 {:.1})">{}</text>"#,
        (TOP + BOTTOM) / 2.0,
        (TOP + BOTTOM) / 2.0,
        escape(y_label)
    );

    // Series: polyline plus one circle per point, and a legend entry.
    let mut legend_y = TOP + 10.0;
    for (index, s) in series.iter().filter(|s| !s.points.is_empty()).enumerate() {
        let color = PALETTE[index % PALETTE.len()];
        let coords: Vec<String> = s
            .points
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", x_pos(x), y_pos(clamp_log10(y))))
            .collect();
        let _ = writeln!(
            svg,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.8"/>"#,
            coords.join(" ")
        );
        for &(x, y) in &s.points {
            let _ = writeln!(
                svg,
                r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#,
                x_pos(x),
                y_pos(clamp_log10(y))
            );
        }
        let _ = writeln!(
            svg,
            r#"<line x1="{:.1}" y1="{legend_y:.1}" x2="{:.1}" y2="{legend_y:.1}" stroke="{color}" stroke-width="3"/>"#,
            RIGHT + 12.0,
            RIGHT + 34.0
        );
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="12">{}</text>"#,
            RIGHT + 40.0,
            legend_y + 4.0,
            escape(&s.label)
        );
        legend_y += 18.0;
    }

    svg.push_str("</svg>\n");
    svg
}

fn bounds(values: &[f64], fallback: (f64, f64)) -> (f64, f64) {
    if values.is_empty() {
        return fallback;
    }
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in values {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    (lo, hi)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> Vec<Series> {
        vec![
            Series {
                label: "a".into(),
                points: vec![(0.1, 1e-3), (0.5, 1e-2), (1.0, 0.3)],
            },
            Series {
                label: "b & c".into(),
                points: vec![(0.1, 2e-4), (0.5, 2e-3), (1.0, 0.1)],
            },
        ]
    }

    #[test]
    fn every_point_becomes_a_circle() {
        let svg = depth_profile_svg("t", "drift", &toy());
        assert_eq!(svg.matches("<circle").count(), 6);
        assert_eq!(svg.matches("<polyline").count(), 2);
    }

    #[test]
    fn document_is_standalone_svg_11_with_escaped_labels() {
        let svg = depth_profile_svg("title <x>", "y & z", &toy());
        assert!(svg.starts_with("<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\""));
        assert!(svg.ends_with("</svg>\n"));
        assert!(svg.contains("b &amp; c"));
        assert!(svg.contains("title &lt;x&gt;"));
        assert!(!svg.contains("b & c"));
    }

    #[test]
    fn zero_values_clamp_to_the_floor_instead_of_breaking_the_log_axis() {
        let series = vec![Series {
            label: "flat".into(),
            points: vec![(0.1, 0.0), (1.0, 0.0)],
        }];
        let svg = depth_profile_svg("t", "y", &series);
        assert!(svg.contains("<polyline"));
        assert!(!svg.contains("NaN") && !svg.contains("inf"));
    }
}
