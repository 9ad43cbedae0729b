//! Brute-force oracles for the baseline aggregators.

use std::sync::Arc;

use fedmid::attack::{benign_statistics, lie_calibrate};
use fedmid::defense::{
    coordinate_median, dnc, geometric_median, krum_scores, multi_krum, trimmed_mean, DncParams, GeometricMedian,
};
use fedmid::model::{Layout, ParamVector};
use fedmid::rng::SimRng;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};

pub fn vectors(rows: &[Vec<f64>]) -> Vec<ParamVector> {
    let layout = Arc::new(Layout::flat(rows[0].len()));
    rows.iter()
        .map(|r| ParamVector::new(layout.clone(), r.iter().map(|v| *v as f32).collect()).unwrap())
        .collect()
}

/// Random instance already rounded to f32 so oracles see the same inputs.
fn instance(rng: &mut SimRng) -> Vec<Vec<f64>> {
    let n = rng.random_range(3..=10);
    let d = rng.random_range(2..=50);
    (0..n)
        .map(|_| (0..d).map(|_| rng.random_range(-5.0f32..5.0) as f64).collect())
        .collect()
}

fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

fn check_vec_close(got: &ParamVector, want: &[f64], tol: f64, what: &str) -> Result<(), String> {
    for (j, (g, w)) in got.as_slice().iter().zip(want).enumerate() {
        ensure!(rel_close(*g as f64, *w, tol), "{what}[{j}]: {g} vs {w}");
    }
    Ok(())
}

fn column(rows: &[Vec<f64>], j: usize) -> Vec<f64> {
    let mut c: Vec<f64> = rows.iter().map(|r| r[j]).collect();
    c.sort_by(f64::total_cmp);
    c
}

fn objective(rows: &[Vec<f64>], v: &[f64]) -> f64 {
    rows.iter()
        .map(|r| r.iter().zip(v).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt())
        .sum()
}

/// Geometric-median oracle independent of Weiszfeld: subgradient descent
/// with diminishing steps from the coordinate median, keeping the best
/// iterate.
fn gm_oracle(rows: &[Vec<f64>]) -> f64 {
    let d = rows[0].len();
    let mut v: Vec<f64> = (0..d)
        .map(|j| {
            let c = column(rows, j);
            let n = c.len();
            if n % 2 == 1 {
                c[n / 2]
            } else {
                0.5 * (c[n / 2 - 1] + c[n / 2])
            }
        })
        .collect();
    let mut best = objective(rows, &v);
    let scale = rows.iter().flatten().map(|x| x.abs()).fold(1.0, f64::max);
    for t in 0..20_000 {
        let mut g = vec![0.0; d];
        for r in rows {
            let dist = r.iter().zip(&v).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            if dist > 1e-12 {
                for j in 0..d {
                    g[j] += (v[j] - r[j]) / dist;
                }
            }
        }
        let gn = g.iter().map(|x| x * x).sum::<f64>().sqrt();
        if gn < 1e-12 {
            break;
        }
        let step = scale * 0.1 / (1.0 + t as f64).sqrt();
        for j in 0..d {
            v[j] -= step * g[j] / gn;
        }
        best = best.min(objective(rows, &v));
    }
    best
}

/// Compare median, trimmed mean, Krum, RFA, DnC and LIE calibration with
/// their oracles on `count` random instances (`n ∈ [3, 10]`, `dim ∈ [2, 50]`).
pub fn random_instances(count: u64, seed: u64) -> Result<(), String> {
    let mut rng = SimRng::seed_from_u64(seed);
    for case in 0..count {
        let rows = instance(&mut rng);
        let u = vectors(&rows);
        let (n, d) = (rows.len(), rows[0].len());

        let med: Vec<f64> = (0..d)
            .map(|j| {
                let c = column(&rows, j);
                if n % 2 == 1 {
                    c[n / 2]
                } else {
                    (c[n / 2 - 1] + c[n / 2]) / 2.0
                }
            })
            .collect();
        check_vec_close(&coordinate_median(&u).map_err(|e| e.to_string())?, &med, 1e-4, "median").map_err(|e| format!("case {case}: {e}"))?;

        let k = rng.random_range(0..=(n - 1) / 2);
        let tm: Vec<f64> = (0..d)
            .map(|j| {
                let c = column(&rows, j);
                c[k..n - k].iter().sum::<f64>() / (n - 2 * k) as f64
            })
            .collect();
        check_vec_close(&trimmed_mean(&u, k).map_err(|e| e.to_string())?, &tm, 1e-4, "trimmed mean").map_err(|e| format!("case {case}: {e}"))?;

        // Classical Krum: exhaustive pairwise scores, single winner.
        let f = rng.random_range(0..=n.saturating_sub(3) / 2);
        let nb = n.saturating_sub(f + 2).clamp(1, n - 1);
        let scores: Vec<f64> = (0..n)
            .map(|i| {
                let mut ds: Vec<f64> = (0..n)
                    .filter(|&j| j != i)
                    .map(|j| rows[i].iter().zip(&rows[j]).map(|(a, b)| (a - b).powi(2)).sum())
                    .collect();
                ds.sort_by(f64::total_cmp);
                ds[..nb].iter().sum()
            })
            .collect();
        let winner = (0..n).min_by(|&a, &b| scores[a].total_cmp(&scores[b])).unwrap();
        for (s, o) in krum_scores(&u, f).iter().zip(&scores) {
            ensure!(rel_close(*s, *o, 1e-4), "case {case}: krum score {s} vs {o}");
        }
        let (kr, sel) = multi_krum(&u, f, 1).map_err(|e| e.to_string())?;
        ensure!(sel == vec![winner], "case {case}: krum picked {sel:?}, oracle {winner}");
        check_vec_close(&kr, &rows[winner], 1e-4, "krum").map_err(|e| format!("case {case}: {e}"))?;

        let (gm, _) = geometric_median(&u, &GeometricMedian::default()).map_err(|e| e.to_string())?;
        let gmv: Vec<f64> = gm.as_slice().iter().map(|v| *v as f64).collect();
        let got = objective(&rows, &gmv);
        let oracle = gm_oracle(&rows);
        ensure!(got <= oracle * (1.0 + 1e-4), "case {case}: rfa objective {got} vs oracle {oracle}");

        // DnC with full coordinates: SVD oracle on the centered matrix.
        let n_mal = rng.random_range(1..n);
        let params = DncParams {
            iters: 1,
            filter: 1.0,
            sub_dim: 10_000,
            n_mal,
        };
        let (got, kept) = dnc(&u, &params, &mut SimRng::seed_from_u64(case)).map_err(|e| e.to_string())?;
        let mean: Vec<f64> = (0..d).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
        let centered = DMatrix::from_fn(n, d, |i, j| rows[i][j] - mean[j]);
        let svd = centered.clone().svd(false, true);
        let (top, _) = svd
            .singular_values
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, v)| if *v > bv { (i, *v) } else { (bi, bv) });
        let vt = svd.v_t.unwrap();
        let dir = vt.row(top);
        let proj: Vec<f64> = (0..n).map(|i| (centered.row(i) * dir.transpose())[(0, 0)].powi(2)).collect();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| proj[b].total_cmp(&proj[a]).then(a.cmp(&b)));
        let mut survivors: Vec<usize> = order[n_mal..].to_vec();
        survivors.sort_unstable();
        ensure!(kept == survivors, "case {case}: dnc kept {kept:?}, oracle {survivors:?}");
        let avg: Vec<f64> = (0..d)
            .map(|j| survivors.iter().map(|&i| rows[i][j]).sum::<f64>() / survivors.len() as f64)
            .collect();
        check_vec_close(&got, &avg, 1e-4, "dnc").map_err(|e| format!("case {case}: {e}"))?;

        let z = rng.random_range(-3.0..3.0);
        let (m, s) = benign_statistics(&u).map_err(|e| e.to_string())?;
        let lie = lie_calibrate(&m, &s, z).map_err(|e| e.to_string())?;
        let want: Vec<f64> = (0..d)
            .map(|j| {
                let mu = rows.iter().map(|r| r[j]).sum::<f64>() / n as f64;
                let var = rows.iter().map(|r| (r[j] - mu).powi(2)).sum::<f64>() / n as f64;
                mu + z * var.sqrt()
            })
            .collect();
        check_vec_close(&lie, &want, 1e-4, "lie").map_err(|e| format!("case {case}: {e}"))?;
    }
    Ok(())
}

/// Geometric median of 5 points in 3-d against a two-level grid search.
pub fn rfa_grid(seed: u64) -> Result<(), String> {
    let mut rng = SimRng::seed_from_u64(seed);
    let rows: Vec<Vec<f64>> = (0..5)
        .map(|_| (0..3).map(|_| rng.random_range(-1.0f32..1.0) as f64).collect())
        .collect();
    let (gm, _) = geometric_median(&vectors(&rows), &GeometricMedian::default()).map_err(|e| e.to_string())?;
    let gmv: Vec<f64> = gm.as_slice().iter().map(|v| *v as f64).collect();
    // Coarse grid, then a fine grid around the coarse optimum.
    let search = |best: &mut (f64, [f64; 3]), center: [f64; 3], half: f64, steps: i32| {
        for a in -steps..=steps {
            for b in -steps..=steps {
                for c in -steps..=steps {
                    let v = [
                        center[0] + half * a as f64 / steps as f64,
                        center[1] + half * b as f64 / steps as f64,
                        center[2] + half * c as f64 / steps as f64,
                    ];
                    let o = objective(&rows, &v);
                    if o < best.0 {
                        *best = (o, v);
                    }
                }
            }
        }
    };
    let mut best = (f64::INFINITY, [0.0; 3]);
    search(&mut best, [0.0; 3], 1.0, 40);
    let coarse = best.1;
    search(&mut best, coarse, 0.05, 40);
    ensure!(objective(&rows, &gmv) <= best.0 + 1e-4, "{} vs grid {}", objective(&rows, &gmv), best.0);
    Ok(())
}

