//! Grouped bar charts as standalone SVG.

use std::fmt::Write as _;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

const PALETTE: [&str; 6] = [
    "#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3", "#937860",
];

/// One bar group per category, one bar per series inside each group.
/// Non-finite values are drawn as empty slots.
pub fn grouped_bar_chart(
    title: &str,
    categories: &[String],
    series: &[(String, Vec<f64>)],
) -> String {
    let (left, top, plot_h, bar_w, gap) = (60.0, 40.0, 220.0, 14.0, 18.0);
    let group_w = bar_w * series.len().max(1) as f64 + gap;
    let width = left + group_w * categories.len().max(1) as f64 + 140.0;
    let height = top + plot_h + 70.0;
    let finite = series
        .iter()
        .flat_map(|(_, v)| v.iter().copied())
        .filter(|v| v.is_finite());
    let (lo, hi) = finite.fold((0.0f64, 0.0f64), |(lo, hi), v| (lo.min(v), hi.max(v)));
    let span = if hi - lo > 0.0 { hi - lo } else { 1.0 };
    let y_of = |v: f64| top + plot_h * (hi - v) / span;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(
        s,
        r#"<text x="{left}" y="20" font-size="14">{}</text>"#,
        escape(title)
    );
    let zero = y_of(0.0);
    let _ = writeln!(
        s,
        r#"<line x1="{left}" y1="{zero:.2}" x2="{:.2}" y2="{zero:.2}" stroke="black"/>"#,
        width - 140.0
    );
    let _ = writeln!(
        s,
        r#"<text x="4" y="{:.2}">{}</text>"#,
        y_of(hi) + 4.0,
        fmt_num(hi)
    );
    let _ = writeln!(
        s,
        r#"<text x="4" y="{:.2}">{}</text>"#,
        y_of(lo) + 4.0,
        fmt_num(lo)
    );
    for (ci, cat) in categories.iter().enumerate() {
        let gx = left + ci as f64 * group_w + gap / 2.0;
        for (si, (_, vals)) in series.iter().enumerate() {
            let Some(&v) = vals.get(ci) else { continue };
            if !v.is_finite() {
                continue;
            }
            let (y0, y1) = (y_of(v.max(0.0)), y_of(v.min(0.0)));
            let _ = writeln!(
                s,
                r#"<rect x="{:.2}" y="{y0:.2}" width="{bar_w}" height="{:.2}" fill="{}"><title>{}</title></rect>"#,
                gx + si as f64 * bar_w,
                (y1 - y0).max(0.5),
                PALETTE[si % PALETTE.len()],
                fmt_num(v)
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" transform="rotate(45 {:.2} {:.2})">{}</text>"#,
            gx,
            top + plot_h + 14.0,
            gx,
            top + plot_h + 14.0,
            escape(cat)
        );
    }
    for (si, (name, _)) in series.iter().enumerate() {
        let ly = top + 14.0 * si as f64;
        let lx = width - 130.0;
        let _ = writeln!(
            s,
            r#"<rect x="{lx}" y="{:.2}" width="10" height="10" fill="{}"/><text x="{:.2}" y="{:.2}">{}</text>"#,
            ly,
            PALETTE[si % PALETTE.len()],
            lx + 14.0,
            ly + 9.0,
            escape(name)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn fmt_num(v: f64) -> String {
    format!("{v:.4}")
}
