//! Evaluation and interpretability metrics: concordance over risk scores,
//! Moran's I spatial autocorrelation over patch-grid heatmaps, and the two
//! channel-attention summaries used for inspection.
//!
//! All functions here take plain `f64` data; callers convert model outputs
//! once at the boundary.

use crate::error::{Error, Result};

/// Concordance index over `(risk, time, censor)` triples.
///
/// A pair `(i, j)` with `t_i < t_j` is comparable iff sample `i` had an
/// event. Risk is a survival score (higher = longer predicted survival), so
/// the pair is concordant when `risk_i < risk_j`. Risk ties count 1/2.
/// Counting is integer-exact; the single division happens at the end.
pub fn c_index(risks: &[f64], times: &[f64], censored: &[bool]) -> Result<f64> {
    if risks.len() != times.len() || risks.len() != censored.len() {
        return Err(Error::contract("risks, times, censored must have equal length"));
    }
    if risks.len() < 2 {
        return Err(Error::contract("need at least 2 samples"));
    }
    let mut comparable: u64 = 0;
    let mut concordant: u64 = 0;
    let mut ties: u64 = 0;
    for i in 0..risks.len() {
        if censored[i] {
            continue;
        }
        for j in 0..risks.len() {
            if i == j || times[i] >= times[j] {
                continue;
            }
            comparable += 1;
            if risks[i] < risks[j] {
                concordant += 1;
            } else if risks[i] == risks[j] {
                ties += 1;
            }
        }
    }
    if comparable == 0 {
        return Err(Error::UndefinedMetric(
            "no comparable pairs for the concordance index".into(),
        ));
    }
    Ok((2 * concordant + ties) as f64 / (2 * comparable) as f64)
}

/// Per-patch values placed on the slide's patch grid, with a foreground mask.
#[derive(Debug, Clone)]
pub struct HeatmapGrid {
    pub rows: usize,
    pub cols: usize,
    /// Row-major `rows * cols` values; masked-out cells hold 0.
    pub values: Vec<f64>,
    /// True where the cell is foreground (participates in statistics).
    pub mask: Vec<bool>,
}

impl HeatmapGrid {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>, mask: Vec<bool>) -> Result<Self> {
        if values.len() != rows * cols || mask.len() != rows * cols {
            return Err(Error::dim(format!(
                "grid {rows}x{cols} needs {} cells, got {} values / {} mask entries",
                rows * cols,
                values.len(),
                mask.len()
            )));
        }
        Ok(HeatmapGrid {
            rows,
            cols,
            values,
            mask,
        })
    }

    /// Scatter per-patch values onto the smallest grid containing all coords.
    pub fn from_patches(coords: &[(u32, u32)], values: &[f64]) -> Result<Self> {
        if coords.len() != values.len() {
            return Err(Error::contract("one value per coordinate required"));
        }
        if coords.is_empty() {
            return Err(Error::contract("cannot build a grid from zero patches"));
        }
        let rows = coords.iter().map(|c| c.0).max().unwrap() as usize + 1;
        let cols = coords.iter().map(|c| c.1).max().unwrap() as usize + 1;
        let mut grid = vec![0.0; rows * cols];
        let mut mask = vec![false; rows * cols];
        for (&(r, c), &v) in coords.iter().zip(values) {
            let idx = r as usize * cols + c as usize;
            if mask[idx] {
                return Err(Error::contract(format!("duplicate patch coordinate ({r}, {c})")));
            }
            grid[idx] = v;
            mask[idx] = true;
        }
        HeatmapGrid::new(rows, cols, grid, mask)
    }

    /// Foreground cells as (row, col, value).
    pub fn unmasked(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.rows).flat_map(move |r| {
            (0..self.cols).filter_map(move |c| {
                let idx = r * self.cols + c;
                self.mask[idx].then(|| (r, c, self.values[idx]))
            })
        })
    }
}

/// Moran's I with rook (4-neighbor) adjacency among foreground cells.
///
/// `I = (N / W0) * sum_ij w_ij (x_i - mean)(x_j - mean) / sum_i (x_i - mean)^2`
/// over foreground cells only. Zero variance or zero adjacent pairs make the
/// statistic undefined.
pub fn morans_i(grid: &HeatmapGrid) -> Result<f64> {
    let cells: Vec<(usize, usize, f64)> = grid.unmasked().collect();
    let n = cells.len();
    if n < 2 {
        return Err(Error::UndefinedMetric(format!(
            "Moran's I needs at least 2 foreground cells, got {n}"
        )));
    }
    let mean = cells.iter().map(|&(_, _, v)| v).sum::<f64>() / n as f64;
    let denom: f64 = cells.iter().map(|&(_, _, v)| (v - mean) * (v - mean)).sum();
    if denom == 0.0 {
        return Err(Error::UndefinedMetric(
            "Moran's I undefined on a constant field".into(),
        ));
    }
    let at = |r: usize, c: usize| -> Option<f64> {
        let idx = r * grid.cols + c;
        grid.mask[idx].then(|| grid.values[idx])
    };
    // ordered pairs: each adjacency contributes twice, matching w_ij symmetry
    let mut w0: u64 = 0;
    let mut num = 0.0;
    for &(r, c, v) in &cells {
        let mut visit = |nr: usize, nc: usize| {
            if let Some(nv) = at(nr, nc) {
                w0 += 1;
                num += (v - mean) * (nv - mean);
            }
        };
        if r > 0 {
            visit(r - 1, c);
        }
        if r + 1 < grid.rows {
            visit(r + 1, c);
        }
        if c > 0 {
            visit(r, c - 1);
        }
        if c + 1 < grid.cols {
            visit(r, c + 1);
        }
    }
    if w0 == 0 {
        return Err(Error::UndefinedMetric(
            "Moran's I undefined without adjacent foreground cells".into(),
        ));
    }
    Ok((n as f64 / w0 as f64) * (num / denom))
}

/// Mean channel-attention matrix over the most-attended patches.
#[derive(Debug, Clone)]
pub struct MarkerAttentionSummary {
    pub m: usize,
    /// Row-major `M x M` average over slides.
    pub mean: Vec<f64>,
    /// Same matrix z-scored across all entries (zeros when constant).
    pub zscored: Vec<f64>,
}

/// Average the per-patch channel-attention matrices of the top
/// `ceil(top_frac * K)` patches by bag attention, per slide, then across
/// slides. `attention[s]` is `K_s * M * M` row-major; `patch_attn[s]` is the
/// bag attention over the same K_s patches.
pub fn avg_marker_attention(
    attention: &[Vec<f64>],
    patch_attn: &[Vec<f64>],
    m: usize,
    top_frac: f64,
) -> Result<MarkerAttentionSummary> {
    if attention.len() != patch_attn.len() {
        return Err(Error::contract("one attention tensor per slide required"));
    }
    if attention.is_empty() {
        return Err(Error::contract("need at least one slide"));
    }
    if !(0.0..=1.0).contains(&top_frac) || top_frac == 0.0 {
        return Err(Error::contract(format!("top_frac must be in (0, 1], got {top_frac}")));
    }
    let mut acc = vec![0.0; m * m];
    for (slide, (att, pa)) in attention.iter().zip(patch_attn).enumerate() {
        let k = pa.len();
        if k == 0 || att.len() != k * m * m {
            return Err(Error::dim(format!(
                "slide {slide}: attention length {} does not match K={k}, M={m}",
                att.len()
            )));
        }
        let take = ((top_frac * k as f64).ceil() as usize).clamp(1, k);
        // sort by attention descending, index ascending for determinism
        let mut order: Vec<usize> = (0..k).collect();
        order.sort_by(|&a, &b| {
            pa[b].partial_cmp(&pa[a]).expect("finite attention").then(a.cmp(&b))
        });
        let mut slide_mean = vec![0.0; m * m];
        for &p in &order[..take] {
            for e in 0..m * m {
                slide_mean[e] += att[p * m * m + e];
            }
        }
        for e in 0..m * m {
            acc[e] += slide_mean[e] / take as f64;
        }
    }
    let n_slides = attention.len() as f64;
    for v in acc.iter_mut() {
        *v /= n_slides;
    }

    let mean_all = acc.iter().sum::<f64>() / (m * m) as f64;
    let var = acc.iter().map(|v| (v - mean_all) * (v - mean_all)).sum::<f64>() / (m * m) as f64;
    let std = var.sqrt();
    let zscored = if std == 0.0 {
        vec![0.0; m * m]
    } else {
        acc.iter().map(|v| (v - mean_all) / std).collect()
    };
    Ok(MarkerAttentionSummary {
        m,
        mean: acc,
        zscored,
    })
}

/// Per-patch dominant in-going channel: column-sum each `M x M` attention
/// matrix and take the argmax (ties to the lowest index), placed on the
/// patch grid. Cells without a patch are `None`.
#[derive(Debug, Clone)]
pub struct MarkerIndexGrid {
    pub rows: usize,
    pub cols: usize,
    pub indices: Vec<Option<usize>>,
}

pub fn argmax_marker_heatmap(
    attention: &[f64],
    m: usize,
    coords: &[(u32, u32)],
) -> Result<MarkerIndexGrid> {
    let k = coords.len();
    if k == 0 {
        return Err(Error::contract("need at least one patch"));
    }
    if attention.len() != k * m * m {
        return Err(Error::dim(format!(
            "attention length {} does not match K={k}, M={m}",
            attention.len()
        )));
    }
    let rows = coords.iter().map(|c| c.0).max().unwrap() as usize + 1;
    let cols = coords.iter().map(|c| c.1).max().unwrap() as usize + 1;
    let mut indices = vec![None; rows * cols];
    for (p, &(r, c)) in coords.iter().enumerate() {
        let base = p * m * m;
        let mut best = 0usize;
        let mut best_sum = f64::NEG_INFINITY;
        for col in 0..m {
            let mut s = 0.0;
            for row in 0..m {
                s += attention[base + row * m + col];
            }
            if s > best_sum {
                best_sum = s;
                best = col;
            }
        }
        let cell = r as usize * cols + c as usize;
        if indices[cell].is_some() {
            return Err(Error::contract(format!("duplicate patch coordinate ({r}, {c})")));
        }
        indices[cell] = Some(best);
    }
    Ok(MarkerIndexGrid {
        rows,
        cols,
        indices,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    // ── concordance ─────────────────────────────────────────────────────

    #[test]
    fn perfectly_ordered_risks_score_one() {
        let c = c_index(&[0.1, 0.5, 0.9], &[1.0, 2.0, 3.0], &[false; 3]).unwrap();
        assert_eq!(c, 1.0);
    }

    #[test]
    fn reversed_risks_score_zero() {
        let c = c_index(&[0.9, 0.5, 0.1], &[1.0, 2.0, 3.0], &[false; 3]).unwrap();
        assert_eq!(c, 0.0);
    }

    #[test]
    fn censoring_restricts_comparable_pairs() {
        // pairs: (0,1) and (0,2) only; sample 1 is censored so its pairs drop
        let c = c_index(&[0.2, 0.9, 0.4], &[1.0, 2.0, 3.0], &[false, true, false]).unwrap();
        assert_eq!(c, 1.0);
    }

    #[test]
    fn risk_ties_count_half() {
        let c = c_index(&[0.5, 0.5], &[1.0, 2.0], &[false, false]).unwrap();
        assert_eq!(c, 0.5);
    }

    #[test]
    fn equal_times_are_not_comparable() {
        assert!(matches!(
            c_index(&[0.1, 0.9], &[5.0, 5.0], &[false, false]),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn all_censored_is_undefined() {
        assert!(matches!(
            c_index(&[0.1, 0.9], &[1.0, 2.0], &[true, true]),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn complement_symmetry_without_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let n = rng.gen_range(5..30);
            let risks: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
            let times: Vec<f64> = (0..n).map(|_| rng.gen_range(1.0..100.0)).collect();
            let cens: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.3)).collect();
            let neg: Vec<f64> = risks.iter().map(|r| -r).collect();
            match (c_index(&risks, &times, &cens), c_index(&neg, &times, &cens)) {
                (Ok(a), Ok(b)) => assert!((a + b - 1.0).abs() < 1e-15),
                (Err(_), Err(_)) => {}
                other => panic!("inconsistent definedness: {other:?}"),
            }
        }
    }

    #[test]
    fn matches_bruteforce_oracle_exactly_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut defined = 0;
        for _ in 0..100 {
            let n = rng.gen_range(2..=50);
            let risks: Vec<f64> = (0..n)
                .map(|_| (rng.gen_range(0..20) as f64) / 10.0) // coarse grid forces ties
                .collect();
            let times: Vec<f64> = (0..n).map(|_| rng.gen_range(0..40) as f64).collect();
            let cens: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.3)).collect();

            // oracle: float accumulation over explicit pair enumeration
            let mut num = 0.0;
            let mut pairs = 0u64;
            for i in 0..n {
                for j in 0..n {
                    if i == j || cens[i] || times[i] >= times[j] {
                        continue;
                    }
                    pairs += 1;
                    if risks[i] < risks[j] {
                        num += 1.0;
                    } else if risks[i] == risks[j] {
                        num += 0.5;
                    }
                }
            }
            let got = c_index(&risks, &times, &cens);
            if pairs == 0 {
                assert!(got.is_err());
            } else {
                defined += 1;
                assert_eq!(got.unwrap(), num / pairs as f64, "must match oracle exactly");
            }
        }
        assert!(defined > 90, "random instances should mostly be defined");
    }

    // ── Moran's I ───────────────────────────────────────────────────────

    fn full_grid(rows: usize, cols: usize, values: Vec<f64>) -> HeatmapGrid {
        HeatmapGrid::new(rows, cols, values, vec![true; rows * cols]).unwrap()
    }

    #[test]
    fn checkerboard_has_perfect_negative_autocorrelation() {
        let g = full_grid(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let i = morans_i(&g).unwrap();
        assert!((i - (-1.0)).abs() < 1e-12);
    }

    #[test]
    fn half_and_half_grid_matches_double_loop_oracle() {
        let g = full_grid(2, 2, vec![1.0, 1.0, 0.0, 0.0]);
        let got = morans_i(&g).unwrap();
        let want = oracle_morans(&g);
        assert!((got - want).abs() < 1e-12);
    }

    fn oracle_morans(g: &HeatmapGrid) -> f64 {
        // brute force over all ordered cell pairs with explicit w_ij
        let mut cells = Vec::new();
        for r in 0..g.rows {
            for c in 0..g.cols {
                if g.mask[r * g.cols + c] {
                    cells.push((r as i64, c as i64, g.values[r * g.cols + c]));
                }
            }
        }
        let n = cells.len() as f64;
        let mean = cells.iter().map(|&(_, _, v)| v).sum::<f64>() / n;
        let mut w0 = 0.0;
        let mut num = 0.0;
        for &(r1, c1, v1) in &cells {
            for &(r2, c2, v2) in &cells {
                let w = ((r1 - r2).abs() + (c1 - c2).abs() == 1) as u64 as f64;
                w0 += w;
                num += w * (v1 - mean) * (v2 - mean);
            }
        }
        let denom: f64 = cells.iter().map(|&(_, _, v)| (v - mean) * (v - mean)).sum();
        (n / w0) * (num / denom)
    }

    #[test]
    fn random_masked_grids_match_double_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..30 {
            let (rows, cols) = (rng.gen_range(2..8), rng.gen_range(2..8));
            let values: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(0.0..1.0)).collect();
            let mask: Vec<bool> = (0..rows * cols).map(|_| rng.gen_bool(0.8)).collect();
            let Ok(g) = HeatmapGrid::new(rows, cols, values, mask) else {
                unreachable!()
            };
            match morans_i(&g) {
                Ok(got) => {
                    let want = oracle_morans(&g);
                    assert!((got - want).abs() < 1e-12, "{got} vs {want}");
                }
                Err(Error::UndefinedMetric(_)) => {} // sparse masks can isolate cells
                Err(e) => panic!("unexpected error {e}"),
            }
        }
    }

    #[test]
    fn constant_grid_is_undefined() {
        let g = full_grid(3, 3, vec![2.5; 9]);
        assert!(matches!(morans_i(&g), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn isolated_cells_are_undefined() {
        // two unmasked cells on a diagonal share no rook edge
        let g = HeatmapGrid::new(
            2,
            2,
            vec![1.0, 0.0, 0.0, 2.0],
            vec![true, false, false, true],
        )
        .unwrap();
        assert!(matches!(morans_i(&g), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn translation_leaves_i_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let values: Vec<f64> = (0..16).map(|_| rng.gen_range(0.0..1.0)).collect();
        let base = morans_i(&full_grid(4, 4, values.clone())).unwrap();
        // embed the same 4x4 block at offset (2, 3) inside a masked 8x9 grid
        let (rows, cols) = (8, 9);
        let mut big = vec![0.0; rows * cols];
        let mut mask = vec![false; rows * cols];
        for r in 0..4 {
            for c in 0..4 {
                big[(r + 2) * cols + (c + 3)] = values[r * 4 + c];
                mask[(r + 2) * cols + (c + 3)] = true;
            }
        }
        let shifted = morans_i(&HeatmapGrid::new(rows, cols, big, mask).unwrap()).unwrap();
        assert!((base - shifted).abs() < 1e-12);
    }

    #[test]
    fn iid_noise_has_near_zero_mean_i_and_smoothing_raises_it() {
        let mut sum_noise = 0.0;
        let mut min_smooth = f64::INFINITY;
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (rows, cols) = (32, 32);
            let noise: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(0.0..1.0)).collect();
            sum_noise += morans_i(&full_grid(rows, cols, noise.clone())).unwrap();

            // 3x3 box blur applied twice produces a spatially smooth field
            let mut field = noise;
            for _ in 0..2 {
                let mut out = vec![0.0; rows * cols];
                for r in 0..rows as i64 {
                    for c in 0..cols as i64 {
                        let mut acc = 0.0;
                        let mut cnt = 0.0;
                        for dr in -1..=1 {
                            for dc in -1..=1 {
                                let (nr, nc) = (r + dr, c + dc);
                                if nr >= 0 && nr < rows as i64 && nc >= 0 && nc < cols as i64 {
                                    acc += field[nr as usize * cols + nc as usize];
                                    cnt += 1.0;
                                }
                            }
                        }
                        out[r as usize * cols + c as usize] = acc / cnt;
                    }
                }
                field = out;
            }
            let i_smooth = morans_i(&full_grid(rows, cols, field)).unwrap();
            min_smooth = min_smooth.min(i_smooth);
        }
        let mean_noise = sum_noise / 20.0;
        assert!(mean_noise.abs() < 0.05, "iid noise mean I = {mean_noise}");
        assert!(min_smooth > 0.3, "smoothed field min I = {min_smooth}");
    }

    // ── channel-attention summaries ─────────────────────────────────────

    #[test]
    fn single_patch_summary_is_that_matrix() {
        let a = vec![0.1, 0.9, 0.6, 0.4];
        let s = avg_marker_attention(&[a.clone()], &[vec![1.0]], 2, 0.10).unwrap();
        assert_eq!(s.mean, a);
    }

    #[test]
    fn identical_matrices_zscore_to_zero_mean() {
        let m = vec![0.25; 4];
        let slides = vec![[m.clone(), m.clone()].concat(), m.clone()];
        let pa = vec![vec![0.7, 0.3], vec![1.0]];
        let s = avg_marker_attention(&slides, &pa, 2, 0.10).unwrap();
        assert_eq!(s.mean, m);
        assert!(s.zscored.iter().all(|&z| z == 0.0));
    }

    #[test]
    fn three_slide_case_matches_bruteforce_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = 3;
        let ks = [7usize, 12, 4];
        let mut attention = Vec::new();
        let mut patch_attn = Vec::new();
        for &k in &ks {
            attention.push((0..k * m * m).map(|_| rng.gen_range(0.0..1.0)).collect::<Vec<f64>>());
            // unique attention values so the top selection is unambiguous
            let mut pa: Vec<f64> = (0..k).map(|i| (i as f64 + 0.5) / k as f64).collect();
            use rand::seq::SliceRandom;
            pa.shuffle(&mut rng);
            patch_attn.push(pa);
        }
        let got = avg_marker_attention(&attention, &patch_attn, m, 0.10).unwrap();

        // oracle: explicit top-ceil(0.1 K) selection and averaging
        let mut acc = vec![0.0; m * m];
        for s in 0..3 {
            let k = ks[s];
            let take = (0.10f64 * k as f64).ceil() as usize;
            let mut idx: Vec<usize> = (0..k).collect();
            idx.sort_by(|&a, &b| patch_attn[s][b].partial_cmp(&patch_attn[s][a]).unwrap());
            let mut sm = vec![0.0; m * m];
            for &p in &idx[..take] {
                for e in 0..m * m {
                    sm[e] += attention[s][p * m * m + e];
                }
            }
            for e in 0..m * m {
                acc[e] += sm[e] / take as f64;
            }
        }
        for e in 0..m * m {
            acc[e] /= 3.0;
            assert!((got.mean[e] - acc[e]).abs() < 1e-12);
        }
        // z-score round trip: mean 0, population std 1
        let zm = got.zscored.iter().sum::<f64>() / (m * m) as f64;
        assert!(zm.abs() < 1e-12);
    }

    #[test]
    fn argmax_heatmap_prefers_largest_column_sum() {
        // columns sums: [0.9, 1.2, 0.9] -> index 1
        let a = vec![
            0.3, 0.4, 0.3, //
            0.3, 0.4, 0.3, //
            0.3, 0.4, 0.3,
        ];
        let g = argmax_marker_heatmap(&a, 3, &[(0, 0)]).unwrap();
        assert_eq!(g.indices, vec![Some(1)]);
    }

    #[test]
    fn argmax_ties_resolve_to_lowest_index() {
        let a = vec![0.25; 9];
        let g = argmax_marker_heatmap(&a, 3, &[(0, 0)]).unwrap();
        assert_eq!(g.indices, vec![Some(0)]);
    }

    #[test]
    fn argmax_matches_oracle_on_random_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (k, m) = (6, 4);
        let att: Vec<f64> = (0..k * m * m).map(|_| rng.gen_range(0.0..1.0)).collect();
        let coords: Vec<(u32, u32)> = (0..k as u32).map(|i| (i / 3, i % 3)).collect();
        let g = argmax_marker_heatmap(&att, m, &coords).unwrap();
        for (p, &(r, c)) in coords.iter().enumerate() {
            let mut best = 0;
            let mut best_v = f64::NEG_INFINITY;
            for col in 0..m {
                let s: f64 = (0..m).map(|row| att[p * m * m + row * m + col]).sum();
                if s > best_v {
                    best_v = s;
                    best = col;
                }
            }
            assert_eq!(g.indices[r as usize * g.cols + c as usize], Some(best));
        }
        // grid cells without patches stay empty
        assert!(g
            .indices
            .iter()
            .filter(|i| i.is_none())
            .count() > 0 || coords.len() == g.rows * g.cols);
    }

    #[test]
    fn grid_from_patches_places_values_and_mask() {
        let g = HeatmapGrid::from_patches(&[(0, 0), (1, 2)], &[0.7, 0.3]).unwrap();
        assert_eq!((g.rows, g.cols), (2, 3));
        assert_eq!(g.values[0], 0.7);
        assert_eq!(g.values[1 * 3 + 2], 0.3);
        assert_eq!(g.mask.iter().filter(|&&m| m).count(), 2);
        assert!(HeatmapGrid::from_patches(&[(0, 0), (0, 0)], &[1.0, 2.0]).is_err());
    }
}
