//! SVG line charts built only from the CSV artifacts of a run directory.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::io::{write_atomic, CsvTable};
use crate::error::Result;

#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 56.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

fn bounds(series: &[Series]) -> (f64, f64, f64, f64) {
    let pts = series.iter().flat_map(|s| s.points.iter()).filter(|(x, y)| x.is_finite() && y.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        return (0.0, 1.0, 0.0, 1.0);
    }
    if x1 - x0 < 1e-12 {
        x1 = x0 + 1.0;
    }
    if y1 - y0 < 1e-12 {
        y0 -= 0.5;
        y1 += 0.5;
    }
    (x0, x1, y0, y1)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Renders a line chart; the output depends only on the arguments.
pub fn line_chart_svg(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let (x0, x1, y0, y1) = bounds(series);
    let pw = WIDTH - 2.0 * MARGIN;
    let ph = HEIGHT - 2.0 * MARGIN;
    let sx = |x: f64| MARGIN + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| HEIGHT - MARGIN - (y - y0) / (y1 - y0) * ph;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#,
        WIDTH / 2.0,
        escape(title)
    );
    let _ = writeln!(
        s,
        r##"<rect x="{MARGIN}" y="{MARGIN}" width="{pw}" height="{ph}" fill="none" stroke="#555555"/>"##
    );
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let xv = x0 + f * (x1 - x0);
        let yv = y0 + f * (y1 - y0);
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            sx(xv),
            HEIGHT - MARGIN + 16.0,
            tick(xv)
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
            MARGIN - 6.0,
            sy(yv) + 4.0,
            tick(yv)
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        WIDTH / 2.0,
        HEIGHT - 12.0,
        escape(x_label)
    );
    let _ = writeln!(
        s,
        r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">{}</text>"#,
        HEIGHT / 2.0,
        HEIGHT / 2.0,
        escape(y_label)
    );
    for (i, ser) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let pts: Vec<String> = ser
            .points
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            pts.join(" ")
        );
        let ly = MARGIN + 14.0 + 16.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{ly:.1}" fill="{color}" text-anchor="end">{}</text>"#,
            WIDTH - MARGIN - 6.0,
            escape(&ser.label)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn tick(v: f64) -> String {
    if v.abs() >= 1000.0 || (v != 0.0 && v.abs() < 0.01) {
        format!("{v:.2e}")
    } else {
        format!("{v:.3}")
    }
}

fn xy(table: &CsvTable, x: &str, y: &str) -> Vec<(f64, f64)> {
    match (table.numbers(x), table.numbers(y)) {
        (Some(xs), Some(ys)) => xs
            .into_iter()
            .zip(ys)
            .filter_map(|(a, b)| Some((a?, b?)))
            .collect(),
        _ => Vec::new(),
    }
}

/// Mean of `y` grouped by `x`, ordered by `x`.
fn grouped_mean(points: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let mut acc: BTreeMap<i64, (f64, usize)> = BTreeMap::new();
    for &(x, y) in points {
        let e = acc.entry(x.round() as i64).or_insert((0.0, 0));
        e.0 += y;
        e.1 += 1;
    }
    acc.into_iter().map(|(x, (s, n))| (x as f64, s / n as f64)).collect()
}

/// Writes one chart per CSV present in `run_dir` into `out_dir`; returns the
/// files written.
pub fn render_report(run_dir: &Path, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    let mut emit = |name: &str, svg: String| -> Result<()> {
        let p = out_dir.join(name);
        write_atomic(&p, svg.as_bytes())?;
        written.push(p);
        Ok(())
    };

    let loss = run_dir.join("pretrain_loss.csv");
    if loss.exists() {
        let t = CsvTable::read(&loss)?;
        let s = Series {
            label: "loss".into(),
            points: xy(&t, "step", "loss"),
        };
        emit("pretrain_loss.svg", line_chart_svg("Pretraining loss", "step", "loss", &[s]))?;
    }

    let metrics = run_dir.join("metrics.csv");
    if metrics.exists() {
        let t = CsvTable::read(&metrics)?;
        let train = Series {
            label: "group terminal reward".into(),
            points: grouped_mean(&xy(&t, "step", "mean_terminal_reward")),
        };
        let eval = Series {
            label: "eval reward".into(),
            points: xy(&t, "step", "eval_reward"),
        };
        emit("reward_curve.svg", line_chart_svg("Reward during alignment", "round", "reward", &[train, eval]))?;
        let kl = Series {
            label: "mean KL".into(),
            points: grouped_mean(&xy(&t, "step", "mean_kl")),
        };
        emit("kl_curve.svg", line_chart_svg("KL to reference", "round", "KL", &[kl]))?;
    }

    let calib = run_dir.join("calibration.csv");
    if calib.exists() {
        let t = CsvTable::read(&calib)?;
        let rows: Vec<(f64, f64, f64, f64)> = match (
            t.numbers("iteration"),
            t.numbers("timestep"),
            t.numbers("psi"),
            t.numbers("imbalance"),
        ) {
            (Some(it), Some(ts), Some(ps), Some(im)) => it
                .into_iter()
                .zip(ts)
                .zip(ps)
                .zip(im)
                .filter_map(|(((a, b), c), d)| Some((a?, b?, c?, d?)))
                .collect(),
            _ => Vec::new(),
        };
        let first = rows.iter().map(|r| r.0).fold(f64::INFINITY, f64::min);
        let last = rows.iter().map(|r| r.0).fold(f64::NEG_INFINITY, f64::max);
        let profile = |iter: f64, col: fn(&(f64, f64, f64, f64)) -> f64| -> Vec<(f64, f64)> {
            let mut p: Vec<(f64, f64)> = rows.iter().filter(|r| r.0 == iter).map(|r| (r.1, col(r))).collect();
            p.sort_by(|a, b| a.0.total_cmp(&b.0));
            p
        };
        let psi = [
            Series {
                label: "initial".into(),
                points: profile(first, |r| r.2),
            },
            Series {
                label: "last iteration".into(),
                points: profile(last, |r| r.2),
            },
        ];
        emit("psi_profile.svg", line_chart_svg("Noise level per timestep", "timestep k", "psi", &psi))?;
        let imb = [
            Series {
                label: "initial".into(),
                points: profile(first, |r| r.3),
            },
            Series {
                label: "last iteration".into(),
                points: profile(last, |r| r.3),
            },
        ];
        emit("imbalance.svg", line_chart_svg("Gain sign imbalance", "timestep k", "imbalance", &imb))?;
    }

    let dense = run_dir.join("dense_rewards.csv");
    if dense.exists() {
        let t = CsvTable::read(&dense)?;
        let latent = Series {
            label: "mean latent reward".into(),
            points: grouped_mean(&xy(&t, "timestep", "latent_reward")),
        };
        let gain = Series {
            label: "mean gain".into(),
            points: grouped_mean(&xy(&t, "timestep", "gain")),
        };
        emit("dense_rewards.svg", line_chart_svg("Latent reward by timestep", "timestep k", "reward", &[latent, gain]))?;
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chart_is_deterministic_and_escaped() {
        let s = [Series {
            label: "a<b".into(),
            points: vec![(0.0, 1.0), (1.0, 2.0), (2.0, f64::NAN)],
        }];
        let a = line_chart_svg("t & u", "x", "y", &s);
        assert_eq!(a, line_chart_svg("t & u", "x", "y", &s));
        assert!(a.contains("a&lt;b") && a.contains("t &amp; u"));
        assert!(a.starts_with("<svg") && a.ends_with("</svg>\n"));
    }

    #[test]
    fn empty_and_flat_series_render() {
        line_chart_svg("t", "x", "y", &[]);
        let flat = [Series {
            label: "f".into(),
            points: vec![(3.0, 1.0)],
        }];
        assert!(line_chart_svg("t", "x", "y", &flat).contains("polyline"));
    }

    #[test]
    fn grouped_mean_orders_by_x() {
        let g = grouped_mean(&[(2.0, 1.0), (1.0, 4.0), (2.0, 3.0)]);
        assert_eq!(g, vec![(1.0, 4.0), (2.0, 2.0)]);
    }
}
