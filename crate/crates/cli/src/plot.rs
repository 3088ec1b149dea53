//! Minimal hand-emitted SVG line charts: one polyline, axes, tick labels,
//! and an optional horizontal guide line. CSV is the data contract; these
//! are a convenience for eyeballing runs.

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 440.0;
const MARGIN_L: f64 = 70.0;
const MARGIN_R: f64 = 20.0;
const MARGIN_T: f64 = 30.0;
const MARGIN_B: f64 = 50.0;

pub struct Series<'a> {
    pub xs: &'a [f64],
    pub ys: &'a [f64],
}

pub struct PlotSpec<'a> {
    pub title: &'a str,
    pub x_label: &'a str,
    pub y_label: &'a str,
    pub series: Series<'a>,
    /// log10-transform the y axis (labels show the raw values).
    pub log_y: bool,
    /// Horizontal guide line at this raw-y level.
    pub guide_y: Option<f64>,
}

fn nice_ticks(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    if !(hi > lo) {
        return vec![lo];
    }
    (0..=count)
        .map(|i| lo + (hi - lo) * i as f64 / count as f64)
        .collect()
}

pub fn render(spec: &PlotSpec) -> String {
    let transform = |y: f64| -> f64 {
        if spec.log_y {
            y.max(1e-300).log10()
        } else {
            y
        }
    };
    let xs = spec.series.xs;
    let ys: Vec<f64> = spec.series.ys.iter().map(|&y| transform(y)).collect();
    let (mut x_lo, mut x_hi) = (f64::MAX, f64::MIN);
    for &x in xs {
        x_lo = x_lo.min(x);
        x_hi = x_hi.max(x);
    }
    let (mut y_lo, mut y_hi) = (f64::MAX, f64::MIN);
    for &y in &ys {
        if y.is_finite() {
            y_lo = y_lo.min(y);
            y_hi = y_hi.max(y);
        }
    }
    if let Some(g) = spec.guide_y {
        let g = transform(g);
        y_lo = y_lo.min(g);
        y_hi = y_hi.max(g);
    }
    if !(x_hi > x_lo) {
        x_hi = x_lo + 1.0;
    }
    if !(y_hi > y_lo) {
        y_hi = y_lo + 1.0;
    }
    let pad = 0.05 * (y_hi - y_lo);
    y_lo -= pad;
    y_hi += pad;

    let px = |x: f64| MARGIN_L + (x - x_lo) / (x_hi - x_lo) * (WIDTH - MARGIN_L - MARGIN_R);
    let py = |y: f64| HEIGHT - MARGIN_B - (y - y_lo) / (y_hi - y_lo) * (HEIGHT - MARGIN_T - MARGIN_B);

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" \
         viewBox=\"0 0 {WIDTH} {HEIGHT}\">\n"
    ));
    svg.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"18\" font-family=\"monospace\" font-size=\"14\">{}</text>\n",
        MARGIN_L,
        xml_escape(spec.title)
    ));
    // axes
    svg.push_str(&format!(
        "<line x1=\"{0}\" y1=\"{1}\" x2=\"{0}\" y2=\"{2}\" stroke=\"black\"/>\n",
        MARGIN_L,
        MARGIN_T,
        HEIGHT - MARGIN_B
    ));
    svg.push_str(&format!(
        "<line x1=\"{0}\" y1=\"{1}\" x2=\"{2}\" y2=\"{1}\" stroke=\"black\"/>\n",
        MARGIN_L,
        HEIGHT - MARGIN_B,
        WIDTH - MARGIN_R
    ));
    for t in nice_ticks(x_lo, x_hi, 5) {
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" font-family=\"monospace\" font-size=\"11\" \
             text-anchor=\"middle\">{:.3e}</text>\n",
            px(t),
            HEIGHT - MARGIN_B + 18.0,
            t
        ));
    }
    for t in nice_ticks(y_lo, y_hi, 5) {
        let label = if spec.log_y {
            format!("1e{t:.1}")
        } else {
            format!("{t:.3e}")
        };
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" font-family=\"monospace\" font-size=\"11\" \
             text-anchor=\"end\">{label}</text>\n",
            MARGIN_L - 6.0,
            py(t) + 4.0
        ));
    }
    svg.push_str(&format!(
        "<text x=\"{:.1}\" y=\"{:.1}\" font-family=\"monospace\" font-size=\"12\" \
         text-anchor=\"middle\">{}</text>\n",
        (MARGIN_L + WIDTH - MARGIN_R) / 2.0,
        HEIGHT - 12.0,
        xml_escape(spec.x_label)
    ));
    svg.push_str(&format!(
        "<text x=\"16\" y=\"{:.1}\" font-family=\"monospace\" font-size=\"12\" \
         text-anchor=\"middle\" transform=\"rotate(-90 16 {:.1})\">{}</text>\n",
        (MARGIN_T + HEIGHT - MARGIN_B) / 2.0,
        (MARGIN_T + HEIGHT - MARGIN_B) / 2.0,
        xml_escape(spec.y_label)
    ));
    if let Some(g) = spec.guide_y {
        let gy = py(transform(g));
        svg.push_str(&format!(
            "<line x1=\"{}\" y1=\"{gy:.1}\" x2=\"{}\" y2=\"{gy:.1}\" stroke=\"red\" \
             stroke-dasharray=\"6,4\"/>\n",
            MARGIN_L,
            WIDTH - MARGIN_R
        ));
    }
    let points: Vec<String> = xs
        .iter()
        .zip(&ys)
        .filter(|(_, y)| y.is_finite())
        .map(|(&x, &y)| format!("{:.2},{:.2}", px(x), py(y)))
        .collect();
    svg.push_str(&format!(
        "<polyline fill=\"none\" stroke=\"steelblue\" stroke-width=\"1.4\" points=\"{}\"/>\n",
        points.join(" ")
    ));
    svg.push_str("</svg>\n");
    svg
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_wellformed_svg() {
        let xs = vec![0.0, 1.0, 2.0, 3.0];
        let ys = vec![1.0, 0.1, 0.5, 0.01];
        let svg = render(&PlotSpec {
            title: "loss",
            x_label: "step",
            y_label: "loss",
            series: Series { xs: &xs, ys: &ys },
            log_y: true,
            guide_y: None,
        });
        assert!(svg.starts_with("<svg"));
        assert!(svg.ends_with("</svg>\n"));
        assert!(svg.contains("polyline"));
        let with_guide = render(&PlotSpec {
            title: "sharpness",
            x_label: "step",
            y_label: "S",
            series: Series { xs: &xs, ys: &ys },
            log_y: false,
            guide_y: Some(0.6),
        });
        assert!(with_guide.contains("stroke-dasharray"));
    }
}
