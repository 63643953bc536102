//! L1 rank-1 fitting and greedy deflation over candidate direction pairs.

use std::cmp::Ordering;

use crate::linalg::{
    jacobi_svd, matmul, normalize_signs, thin_qr, truncated_svd, LinalgError, Matrix, SvdTriple,
};
use crate::scalar::Scalar;

/// Entries with `|u_i·v_j|` at or below this are left out of the ratio set.
pub const WEIGHT_FLOOR: f64 = 1e-12;

/// Grids up to this many entries are fit by selecting over every ratio.
const DIRECT_FIT_LIMIT: usize = 1 << 16;
/// Sample size used to bracket the weighted median on larger grids.
const BRACKET_SAMPLE: usize = 1 << 15;
/// Half-width of the bracket, as a fraction of the sampled weight.
const BRACKET_HALF_WIDTH: f64 = 0.02;
/// Pair pruning by lower bounds only pays off on large residuals.
const BOUND_LIMIT: usize = 1 << 12;

/// A deterministic stratified subsample of a residual's entries: every
/// `s`-th row and column in order of decreasing candidate magnitude
/// (`max_c |u_c,i|` for rows, `max_c |v_c,j|` for columns, index order on
/// ties), with the smallest stride `s` that keeps the grid within the cap.
/// One grid serves every candidate pair, so their objectives stay comparable.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct SubGrid {
    pub(crate) rows: Vec<usize>,
    pub(crate) cols: Vec<usize>,
}

impl SubGrid {
    /// `None` when the cap does not restrict the `d × k` residual.
    pub(crate) fn for_candidates<T: Scalar>(
        left: &[Vec<T>],
        right: &[Vec<T>],
        cap: Option<usize>,
    ) -> Option<Self> {
        let d = left.first().map_or(0, Vec::len);
        let k = right.first().map_or(0, Vec::len);
        let cap = match cap {
            Some(c) if c < d * k => c.max(1),
            _ => return None,
        };
        let mut stride = ((d * k) as f64 / cap as f64).sqrt().ceil().max(1.0) as usize;
        while d.div_ceil(stride) * k.div_ceil(stride) > cap {
            stride += 1;
        }
        Some(SubGrid {
            rows: strided_by_magnitude(&peak_magnitudes(left, d), stride),
            cols: strided_by_magnitude(&peak_magnitudes(right, k), stride),
        })
    }

    #[cfg(test)]
    pub(crate) fn len(&self) -> usize {
        self.rows.len() * self.cols.len()
    }

    fn gather<T: Scalar>(&self, m: &Matrix<T>) -> Matrix<T> {
        Matrix::from_fn(self.rows.len(), self.cols.len(), |i, j| {
            m[(self.rows[i], self.cols[j])]
        })
    }

    fn restrict_rows<T: Scalar>(&self, x: &[T]) -> Vec<T> {
        self.rows.iter().map(|&i| x[i]).collect()
    }

    fn restrict_cols<T: Scalar>(&self, x: &[T]) -> Vec<T> {
        self.cols.iter().map(|&j| x[j]).collect()
    }
}

fn peak_magnitudes<T: Scalar>(vectors: &[Vec<T>], n: usize) -> Vec<T> {
    (0..n)
        .map(|i| vectors.iter().fold(T::zero(), |m, x| m.max(x[i].abs())))
        .collect()
}

fn strided_by_magnitude<T: Scalar>(x: &[T], stride: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| {
        x[b].partial_cmp(&x[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut picked: Vec<usize> = order.into_iter().step_by(stride).collect();
    picked.sort_unstable();
    picked
}

/// Scalar `d` minimizing `Σ_ij |r_ij − d·u_i·v_j|`.
///
/// Solved exactly as the weighted median of the ratios `r_ij / (u_i·v_j)`
/// with weights `|u_i·v_j|`, over entries whose weight exceeds
/// [`WEIGHT_FLOOR`]; ties at half-mass take the lower ratio. Returns zero when
/// no entry clears the floor. With `subsample`, the fit runs on the
/// stratified grid of rows and columns ranked by `|u_i|` and `|v_j|`, keeping
/// at most `subsample` entries.
pub fn fit_rank1_l1<T: Scalar>(
    residual: &Matrix<T>,
    u: &[T],
    v: &[T],
    subsample: Option<usize>,
) -> T {
    assert_eq!(
        residual.shape(),
        (u.len(), v.len()),
        "fit vectors must match the residual"
    );
    match SubGrid::for_candidates(&[u.to_vec()], &[v.to_vec()], subsample) {
        Some(grid) => {
            fit_with_objective(
                &grid.gather(residual),
                &grid.restrict_rows(u),
                &grid.restrict_cols(v),
            )
            .0
        }
        None => fit_with_objective(residual, u, v).0,
    }
}

/// The L1-optimal scale and its objective `Σ |r_ij − d·u_i·v_j|`.
pub(crate) fn fit_with_objective<T: Scalar>(residual: &Matrix<T>, u: &[T], v: &[T]) -> (T, T) {
    let floor = T::lit(WEIGHT_FLOOR);
    if residual.len() > DIRECT_FIT_LIMIT {
        if let Some(fit) = bracketed_median(residual, u, v, floor) {
            return fit;
        }
    }
    let mut items = Vec::with_capacity(residual.len());
    for (i, &ui) in u.iter().enumerate() {
        for (&r, &vj) in residual.row(i).iter().zip(v) {
            let a = ui * vj;
            let w = a.abs();
            if w > floor {
                items.push((r / a, w));
            }
        }
    }
    let d = if items.is_empty() {
        T::zero()
    } else {
        let total: T = items.iter().map(|&(_, w)| w).sum();
        weighted_lower_quantile(&mut items, total / (T::one() + T::one()))
    };
    (d, l1_objective(residual, u, v, d))
}

/// Brackets the median with a strided sample, then selects among the entries
/// inside the bracket only. The objective is assembled in the same pass: an
/// entry below the bracket contributes `d·w − s` and one above `s − d·w`,
/// where `w = |a|` and `s = r·sign(a)`. Entries under the weight floor are
/// set aside and charged `|r − d·a|` once `d` is known. `None` when the
/// bracket misses the median.
fn bracketed_median<T: Scalar>(residual: &Matrix<T>, u: &[T], v: &[T], floor: T) -> Option<(T, T)> {
    let (rows, cols) = residual.shape();
    let stride = sample_stride(rows * cols, cols);
    let mut sample = Vec::with_capacity(BRACKET_SAMPLE + 1);
    for pos in (0..rows * cols).step_by(stride) {
        let (i, j) = (pos / cols, pos % cols);
        let a = u[i] * v[j];
        let w = a.abs();
        if w > floor {
            sample.push((residual[(i, j)] / a, w));
        }
    }
    if sample.len() < 64 {
        return None;
    }
    let sampled: T = sample.iter().map(|&(_, w)| w).sum();
    let half_width = T::lit(BRACKET_HALF_WIDTH);
    let half = T::lit(0.5);
    let lo = weighted_lower_quantile(&mut sample, sampled * (half - half_width));
    let hi = weighted_lower_quantile(&mut sample, sampled * (half + half_width));

    let mut scan = BracketScan::new(lo, hi, floor);
    for (i, &ui) in u.iter().enumerate() {
        scan.row(residual.row(i), ui, v);
    }
    let BracketScan {
        sums,
        mut inside,
        light,
        ..
    } = scan;
    let [w_below, s_below, w_above, s_above] = sums;
    let inside_w: T = inside.iter().map(|&(_, w)| w).sum();
    let half_mass = (w_below + inside_w + w_above) * half;
    if inside.is_empty() || w_below >= half_mass || w_below + inside_w < half_mass {
        return None;
    }
    let d = weighted_lower_quantile(&mut inside, half_mass - w_below);
    let inside_obj: T = inside.iter().map(|&(rho, w)| w * (rho - d).abs()).sum();
    let light_obj: T = light.iter().map(|&(r, a)| (r - d * a).abs()).sum();
    let objective = (d * w_below - s_below) + (s_above - d * w_above) + inside_obj + light_obj;
    Some((d, objective))
}

/// Lanes of independent accumulators in [`BracketScan::row`], so the
/// reductions vectorize.
const LANES: usize = 4;

/// Running state of the bracket pass.
struct BracketScan<T> {
    lo: T,
    hi: T,
    floor: T,
    /// `[w_below, s_below, w_above, s_above]`.
    sums: [T; 4],
    /// `(ratio, weight)` of entries inside the bracket.
    inside: Vec<(T, T)>,
    /// `(r, a)` of entries under the weight floor.
    light: Vec<(T, T)>,
}

impl<T: Scalar> BracketScan<T> {
    fn new(lo: T, hi: T, floor: T) -> Self {
        Self {
            lo,
            hi,
            floor,
            sums: [T::zero(); 4],
            inside: Vec::new(),
            light: Vec::new(),
        }
    }

    #[inline(never)]
    fn row(&mut self, row: &[T], ui: T, vs: &[T]) {
        let (lo, hi, floor) = (self.lo, self.hi, self.floor);
        let zero = T::zero();
        let (mut wb, mut sb, mut wa, mut sa) =
            ([zero; LANES], [zero; LANES], [zero; LANES], [zero; LANES]);
        let n = row.len().min(vs.len());
        let mut rc = row[..n].chunks_exact(LANES);
        let mut vc = vs[..n].chunks_exact(LANES);
        for (rch, vch) in (&mut rc).zip(&mut vc) {
            let mut odd = false;
            for l in 0..LANES {
                let a = ui * vch[l];
                let w = a.abs();
                let s = rch[l] * T::one().with_sign_of(a);
                let heavy = w > floor;
                let below = heavy & (s < lo * w);
                let above = heavy & (s > hi * w);
                let fb = T::from_flag(below);
                let fa = T::from_flag(above);
                wb[l] += fb * w;
                sb[l] += fb * s;
                wa[l] += fa * w;
                sa[l] += fa * s;
                odd |= !below & !above;
            }
            if odd {
                for l in 0..LANES {
                    self.set_aside(rch[l], ui * vch[l]);
                }
            }
        }
        for (&r, &vj) in rc.remainder().iter().zip(vc.remainder()) {
            let a = ui * vj;
            let w = a.abs();
            let s = r * T::one().with_sign_of(a);
            if w > floor && s < lo * w {
                wb[0] += w;
                sb[0] += s;
            } else if w > floor && s > hi * w {
                wa[0] += w;
                sa[0] += s;
            } else {
                self.set_aside(r, a);
            }
        }
        let fold = |x: [T; LANES]| x.iter().fold(zero, |acc, &y| acc + y);
        for (total, lanes) in self.sums.iter_mut().zip([wb, sb, wa, sa]) {
            *total += fold(lanes);
        }
    }

    /// Records an entry that is neither below nor above the bracket.
    #[inline]
    fn set_aside(&mut self, r: T, a: T) {
        let w = a.abs();
        if w <= self.floor {
            self.light.push((r, a));
        } else {
            let s = r * T::one().with_sign_of(a);
            if s >= self.lo * w && s <= self.hi * w {
                self.inside.push((r / a, w));
            }
        }
    }
}

/// About `len / BRACKET_SAMPLE`, adjusted to be coprime with the row width so
/// the sample visits every column.
fn sample_stride(len: usize, width: usize) -> usize {
    let mut stride = (len / BRACKET_SAMPLE).max(1);
    while gcd(stride, width) != 1 {
        stride += 1;
    }
    stride
}

fn gcd(mut a: usize, mut b: usize) -> usize {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Smallest value `x` among `items = [(value, weight)]` whose cumulative
/// weight `Σ_{value ≤ x} weight` reaches `target`. Returns the largest value
/// when `target` exceeds the total. Reorders `items`.
pub fn weighted_lower_quantile<T: Scalar>(items: &mut [(T, T)], target: T) -> T {
    assert!(!items.is_empty(), "weighted quantile of an empty set");
    let cmp = |a: &(T, T), b: &(T, T)| a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal);
    let mut slice = items;
    let mut target = target;
    loop {
        let n = slice.len();
        if n == 1 {
            return slice[0].0;
        }
        let (_, &mut (pivot, _), _) = slice.select_nth_unstable_by(n / 2, cmp);
        // Three-way partition around the pivot value.
        let (mut lt, mut i, mut gt) = (0, 0, n);
        while i < gt {
            if slice[i].0 < pivot {
                slice.swap(lt, i);
                lt += 1;
                i += 1;
            } else if slice[i].0 > pivot {
                gt -= 1;
                slice.swap(i, gt);
            } else {
                i += 1;
            }
        }
        let w_lt: T = slice[..lt].iter().map(|&(_, w)| w).sum();
        if lt > 0 && w_lt >= target {
            slice = &mut slice[..lt];
            continue;
        }
        let w_eq: T = slice[lt..gt].iter().map(|&(_, w)| w).sum();
        if w_lt + w_eq >= target || gt == n {
            return pivot;
        }
        target -= w_lt + w_eq;
        slice = &mut slice[gt..];
    }
}

/// `Σ |r_ij − d·u_i·v_j|`.
pub(crate) fn l1_objective<T: Scalar>(residual: &Matrix<T>, u: &[T], v: &[T], d: T) -> T {
    let mut acc = T::zero();
    for (i, &ui) in u.iter().enumerate() {
        let a = d * ui;
        let row_sum: T = residual
            .row(i)
            .iter()
            .zip(v)
            .map(|(&r, &vj)| (r - a * vj).abs())
            .sum();
        acc += row_sum;
    }
    acc
}

/// Lower bounds on `min_d Σ|R − d·u·vᵀ|` for every candidate pair.
///
/// For any sign pattern `S` with `|S_ij| ≤ 1` and `Σ S_ij u_i v_j = 0`, the
/// objective is at least `Σ S_ij R_ij`. Taking `S = λ·sign(R) + μ·sign(u vᵀ)`
/// gives a bound that needs only `sign(R)·V` and `R·sign(V)`.
fn pair_lower_bounds<T: Scalar>(
    residual: &Matrix<T>,
    left: &[Vec<T>],
    right: &[Vec<T>],
) -> Vec<Vec<T>> {
    let (d, k) = residual.shape();
    let c = right.len();
    let packed: Vec<T> = (0..k)
        .flat_map(|j| right.iter().map(move |v| v[j]))
        .collect();
    let packed_sign: Vec<T> = packed.iter().map(|x| x.sign_or_zero()).collect();
    let mut sign_r_v = vec![T::zero(); d * c];
    let mut r_sign_v = vec![T::zero(); d * c];
    let mut l1 = T::zero();
    for i in 0..d {
        let g = &mut sign_r_v[i * c..(i + 1) * c];
        let h = &mut r_sign_v[i * c..(i + 1) * c];
        for (j, &r) in residual.row(i).iter().enumerate() {
            l1 += r.abs();
            let s = r.sign_or_zero();
            let vrow = &packed[j * c..(j + 1) * c];
            let srow = &packed_sign[j * c..(j + 1) * c];
            for t in 0..c {
                g[t] += s * vrow[t];
                h[t] += r * srow[t];
            }
        }
    }
    let right_l1: Vec<T> = right
        .iter()
        .map(|v| v.iter().map(|x| x.abs()).sum())
        .collect();
    left.iter()
        .map(|u| {
            let u_l1: T = u.iter().map(|x| x.abs()).sum();
            (0..c)
                .map(|t| {
                    let a_l1 = u_l1 * right_l1[t];
                    if a_l1.is_zero() {
                        return l1;
                    }
                    let g: T = (0..d).map(|i| u[i] * sign_r_v[i * c + t]).sum();
                    let h: T = (0..d)
                        .map(|i| u[i].sign_or_zero() * r_sign_v[i * c + t])
                        .sum();
                    let lambda = T::one() / (T::one() + g.abs() / a_l1);
                    (lambda * (l1 - g * h / a_l1)).max(T::zero())
                })
                .collect()
        })
        .collect()
}

/// One extracted rank-1 term `scale · left[left_index] · right[right_index]ᵀ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankOneComponent<T = f64> {
    pub left_index: usize,
    pub right_index: usize,
    pub scale: T,
    /// L1 objective against the residual the term was fit to.
    pub objective: T,
}

/// Sum of rank-1 terms built from candidate directions.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankExpansion<T = f64> {
    pub rows: usize,
    pub cols: usize,
    pub left: Vec<Vec<T>>,
    pub right: Vec<Vec<T>>,
    pub components: Vec<RankOneComponent<T>>,
}

impl<T: Scalar> LowRankExpansion<T> {
    pub fn to_matrix(&self) -> Matrix<T> {
        let mut out = Matrix::zeros(self.rows, self.cols);
        for c in &self.components {
            out.sub_outer(
                -c.scale,
                &self.left[c.left_index],
                &self.right[c.right_index],
            );
        }
        out
    }

    /// Top-`t` singular triplets, computed from the factored form when the
    /// term count allows a thin QR of each side.
    pub fn svd(&self, t: usize) -> Result<SvdTriple<T>, LinalgError> {
        let m = self.components.len();
        let max = self.rows.min(self.cols);
        if t == 0 || t > max {
            return Err(LinalgError::RankOutOfRange { requested: t, max });
        }
        if m == 0 || m > max {
            return truncated_svd(&self.to_matrix(), t);
        }
        let p: Vec<Vec<T>> = self
            .components
            .iter()
            .map(|c| self.left[c.left_index].clone())
            .collect();
        let q: Vec<Vec<T>> = self
            .components
            .iter()
            .map(|c| self.right[c.right_index].clone())
            .collect();
        let (qp, rp) = thin_qr(&Matrix::from_columns(self.rows, &p)?)?;
        let (qq, rq) = thin_qr(&Matrix::from_columns(self.cols, &q)?)?;
        let scales: Vec<T> = self.components.iter().map(|c| c.scale).collect();
        let core = matmul(&matmul(&rp, &Matrix::diag(&scales))?, &rq.transpose())?;
        let small = jacobi_svd(&core)?;
        let mut triple = SvdTriple {
            left: matmul(&qp, &small.left)?,
            values: small.values,
            right: matmul(&qq, &small.right)?,
        }
        .truncate(t);
        normalize_signs(&mut triple);
        Ok(triple)
    }
}

/// Greedy L1 deflation: `steps` times, fit every (left, right) candidate pair
/// to the current residual, keep the pair with the smallest L1 objective
/// (lowest `(left, right)` index on ties) and subtract its term. With
/// `subsample`, the whole deflation runs on one stratified grid of at most
/// that many entries.
pub fn deflate<T: Scalar>(
    dw: &Matrix<T>,
    left: Vec<Vec<T>>,
    right: Vec<Vec<T>>,
    steps: usize,
    subsample: Option<usize>,
) -> LowRankExpansion<T> {
    let (rows, cols) = dw.shape();
    let components = match SubGrid::for_candidates(&left, &right, subsample) {
        Some(grid) => {
            let sub_left: Vec<Vec<T>> = left.iter().map(|u| grid.restrict_rows(u)).collect();
            let sub_right: Vec<Vec<T>> = right.iter().map(|v| grid.restrict_cols(v)).collect();
            greedy_components(grid.gather(dw), &sub_left, &sub_right, steps)
        }
        None => greedy_components(dw.clone(), &left, &right, steps),
    };
    LowRankExpansion {
        rows,
        cols,
        left,
        right,
        components,
    }
}

fn greedy_components<T: Scalar>(
    mut residual: Matrix<T>,
    left: &[Vec<T>],
    right: &[Vec<T>],
    steps: usize,
) -> Vec<RankOneComponent<T>> {
    let mut components = Vec::with_capacity(steps);
    for _ in 0..steps {
        let best = select_pair(&residual, left, right, true);
        residual.sub_outer(best.scale, &left[best.left_index], &right[best.right_index]);
        components.push(best);
    }
    components
}

/// The best-fitting candidate pair for `residual`. With `use_bounds` on large
/// residuals, pairs are fit in order of their lower bounds and the scan stops
/// once no remaining bound can beat the best objective.
pub(crate) fn select_pair<T: Scalar>(
    residual: &Matrix<T>,
    left: &[Vec<T>],
    right: &[Vec<T>],
    use_bounds: bool,
) -> RankOneComponent<T> {
    let mut pairs: Vec<(usize, usize, T)> = Vec::with_capacity(left.len() * right.len());
    let bounded = use_bounds && residual.len() > BOUND_LIMIT;
    if bounded {
        let bounds = pair_lower_bounds(residual, left, right);
        for (li, row) in bounds.iter().enumerate() {
            for (ri, &b) in row.iter().enumerate() {
                pairs.push((li, ri, b));
            }
        }
        pairs.sort_by(|a, b| {
            a.2.partial_cmp(&b.2)
                .unwrap_or(Ordering::Equal)
                .then((a.0, a.1).cmp(&(b.0, b.1)))
        });
    } else {
        for li in 0..left.len() {
            for ri in 0..right.len() {
                pairs.push((li, ri, T::neg_infinity()));
            }
        }
    }
    // Absolute slack for rounding in the bound arithmetic.
    let slack = residual.l1_norm() * T::lit(1e-9);

    let mut best: Option<RankOneComponent<T>> = None;
    for (li, ri, bound) in pairs {
        if let Some(b) = &best {
            if bounded && bound > b.objective + slack {
                break;
            }
        }
        let (scale, objective) = fit_with_objective(residual, &left[li], &right[ri]);
        let better = match &best {
            None => true,
            Some(b) => {
                objective < b.objective
                    || (objective == b.objective && (li, ri) < (b.left_index, b.right_index))
            }
        };
        if better {
            best = Some(RankOneComponent {
                left_index: li,
                right_index: ri,
                scale,
                objective,
            });
        }
    }
    best.expect("at least one candidate pair")
}
