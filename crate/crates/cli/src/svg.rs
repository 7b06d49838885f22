use std::fmt::Write;

use a2_core::pose::SweepRow;

const W: f64 = 480.0;
const H: f64 = 320.0;
const PAD: f64 = 48.0;
const SERIES: [(&str, &str); 3] = [("AUC@1px", "#d62728"), ("AUC@5px", "#2ca02c"), ("AUC@10px", "#1f77b4")];

/// AUC (%) against outlier ratio, one polyline per pixel threshold.
pub fn sweep_plot(rows: &[SweepRow]) -> String {
    let (x0, x1) = rows
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| (lo.min(r.ratio), hi.max(r.ratio)));
    let span = if x1 > x0 { x1 - x0 } else { 1.0 };
    let px = |r: f64| PAD + (r - x0) / span * (W - 2.0 * PAD);
    let py = |auc: f64| H - PAD - auc.clamp(0.0, 100.0) / 100.0 * (H - 2.0 * PAD);

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#);
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<path d="M{PAD} {PAD} V{b} H{r}" fill="none" stroke="black"/>"#,
        b = H - PAD,
        r = W - PAD
    );
    for tick in [0.0, 50.0, 100.0] {
        let _ = writeln!(
            s,
            r#"<text x="{x}" y="{y:.1}" font-size="10" text-anchor="end">{tick}</text>"#,
            x = PAD - 4.0,
            y = py(tick) + 3.0
        );
    }
    if !rows.is_empty() {
        for (x, anchor) in [(x0, "start"), (x1, "end")] {
            let _ = writeln!(
                s,
                r#"<text x="{px:.1}" y="{y}" font-size="10" text-anchor="{anchor}">{x}</text>"#,
                px = px(x),
                y = H - PAD + 14.0
            );
        }
    }
    let _ = writeln!(
        s,
        r#"<text x="{x}" y="{y}" font-size="11" text-anchor="middle">outlier ratio</text>"#,
        x = W / 2.0,
        y = H - 12.0
    );
    for (i, (label, color)) in SERIES.iter().enumerate() {
        let pts: Vec<String> = rows
            .iter()
            .map(|r| {
                let auc = [r.auc1, r.auc5, r.auc10][i];
                format!("{:.2},{:.2}", px(r.ratio), py(auc))
            })
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            pts.join(" ")
        );
        let _ = writeln!(
            s,
            r#"<text x="{x}" y="{y}" font-size="10" fill="{color}">{label}</text>"#,
            x = W - PAD - 60.0,
            y = PAD + 12.0 * i as f64
        );
    }
    s.push_str("</svg>\n");
    s
}
