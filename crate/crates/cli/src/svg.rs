//! Minimal SVG line charts of an aggregate series: the seed-wise median as a
//! line over a min–max band. Output depends only on the aggregate data.

use std::fmt::Write;

use nlsid_core::metrics::AggregateSeries;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 56.0;
/// Consecutive plotted `t` values grow by at least this factor.
const THINNING: f64 = 1.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum YScale {
    Linear,
    Log,
}

/// Chart of one metrics column against log-scaled `t`.
pub fn chart(agg: &AggregateSeries, column: &str, y_scale: YScale, title: &str) -> Option<String> {
    let col = AggregateSeries::column_index(column)?;
    let mut pts = Vec::new();
    let mut next_t = 0.0;
    for (k, (&t, &(med, lo, hi))) in agg.t.iter().zip(&agg.stats[col]).enumerate() {
        let last = k + 1 == agg.t.len();
        if t == 0 || (!last && (t as f64) < next_t) {
            continue;
        }
        if y_scale == YScale::Log && !(lo > 0.0) {
            continue;
        }
        next_t = t as f64 * THINNING;
        pts.push((t as f64, med, lo, hi));
    }
    if pts.is_empty() {
        return Some(empty(title));
    }
    let ty = |v: f64| if y_scale == YScale::Log { v.log10() } else { v };
    let x0 = pts[0].0.log10();
    let x1 = pts[pts.len() - 1].0.log10().max(x0 + 1e-9);
    let y0 = pts.iter().map(|p| ty(p.2)).fold(f64::INFINITY, f64::min);
    let mut y1 = pts.iter().map(|p| ty(p.3)).fold(f64::NEG_INFINITY, f64::max);
    if y1 - y0 < 1e-12 {
        y1 = y0 + 1.0;
    }
    let px = |t: f64| MARGIN + (t.log10() - x0) / (x1 - x0) * (WIDTH - 2.0 * MARGIN);
    let py = |v: f64| HEIGHT - MARGIN - (ty(v) - y0) / (y1 - y0) * (HEIGHT - 2.0 * MARGIN);

    let mut s = header(title);
    let mut band = String::new();
    for p in &pts {
        let _ = write!(band, "{:.2},{:.2} ", px(p.0), py(p.3));
    }
    for p in pts.iter().rev() {
        let _ = write!(band, "{:.2},{:.2} ", px(p.0), py(p.2));
    }
    let _ = writeln!(s, r##"<polygon points="{}" fill="#9ecae1" fill-opacity="0.5" stroke="none"/>"##, band.trim_end());
    let line: Vec<String> = pts.iter().map(|p| format!("{:.2},{:.2}", px(p.0), py(p.1))).collect();
    let _ = writeln!(s, r##"<polyline points="{}" fill="none" stroke="#08519c" stroke-width="1.5"/>"##, line.join(" "));

    // Axes with decade ticks on x and end labels on y.
    let _ = writeln!(
        s,
        r#"<path d="M{m},{top} V{bottom} H{right}" fill="none" stroke="black"/>"#,
        m = MARGIN,
        top = MARGIN,
        bottom = HEIGHT - MARGIN,
        right = WIDTH - MARGIN
    );
    let mut decade = x0.ceil() as i32;
    while (decade as f64) <= x1 + 1e-12 {
        let x = px(10f64.powi(decade));
        let _ = writeln!(
            s,
            r#"<line x1="{x:.2}" y1="{b}" x2="{x:.2}" y2="{b2}" stroke="black"/><text x="{x:.2}" y="{ty}" font-size="11" text-anchor="middle">1e{decade}</text>"#,
            b = HEIGHT - MARGIN,
            b2 = HEIGHT - MARGIN + 5.0,
            ty = HEIGHT - MARGIN + 18.0
        );
        decade += 1;
    }
    let label = |v: f64| if y_scale == YScale::Log { format!("{:.1e}", 10f64.powf(v)) } else { format!("{v:.3e}") };
    let _ = writeln!(
        s,
        r#"<text x="{x}" y="{yb}" font-size="11" text-anchor="end">{lo}</text><text x="{x}" y="{yt}" font-size="11" text-anchor="end">{hi}</text>"#,
        x = MARGIN - 4.0,
        yb = HEIGHT - MARGIN,
        yt = MARGIN + 4.0,
        lo = label(y0),
        hi = label(y1)
    );
    let _ = writeln!(
        s,
        r#"<text x="{x}" y="{y}" font-size="12" text-anchor="middle">t</text>"#,
        x = WIDTH / 2.0,
        y = HEIGHT - 12.0
    );
    s.push_str("</svg>\n");
    Some(s)
}

fn header(title: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{x}\" y=\"24\" font-size=\"14\" text-anchor=\"middle\">{title}</text>\n",
        x = WIDTH / 2.0,
        title = escape(title)
    )
}

fn empty(title: &str) -> String {
    let mut s = header(title);
    s.push_str("</svg>\n");
    s
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// The two standard charts of a case: `(file name, contents)`.
pub fn case_charts(agg: &AggregateSeries, case: &str) -> Vec<(&'static str, String)> {
    let mut out = Vec::new();
    if let Some(s) = chart(agg, "avg_regret", YScale::Linear, &format!("(1/t) R_t, {case} (median, min-max)")) {
        out.push(("avg_regret.svg", s));
    }
    if let Some(s) = chart(agg, "param_err", YScale::Log, &format!("parameter error, {case} (median, min-max)")) {
        out.push(("param_err.svg", s));
    }
    out
}
