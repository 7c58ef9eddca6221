//! Class-level prototype machinery: centroids, the distance softmax, source
//! cross-entropy, pseudo-labels and class matching.
//!
//! Losses return gradients with respect to every row of the feature matrices
//! they were given. Centroids are differentiable functions of their member rows;
//! callers decide which rows are live parameters and drop the rest.

use crate::error::{shape_err, Error, Result};
use crate::linalg::{axpy, mean_of_rows, nearest, sq_dist, Matrix};

/// Loss value with the gradient over each input row.
#[derive(Debug, Clone, PartialEq)]
pub struct Loss {
    pub value: f64,
    pub grad: Matrix,
}

/// Per-class centroids of one domain. A centroid is `None` iff its count is zero.
#[derive(Debug, Clone, PartialEq)]
pub struct SideCentroids {
    pub centroids: Vec<Option<Vec<f64>>>,
    pub counts: Vec<usize>,
}

impl SideCentroids {
    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn present(&self) -> usize {
        self.centroids.iter().filter(|c| c.is_some()).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassCentroids {
    pub source: SideCentroids,
    pub target: SideCentroids,
}

impl ClassCentroids {
    /// `(1/N') sum ||c_s - c_t||^2` over the N' classes with both centroids present.
    pub fn match_loss(&self) -> f64 {
        let mut total = 0.0;
        let mut pairs = 0;
        for (s, t) in self.source.centroids.iter().zip(&self.target.centroids) {
            if let (Some(s), Some(t)) = (s, t) {
                total += sq_dist(s, t);
                pairs += 1;
            }
        }
        if pairs == 0 {
            0.0
        } else {
            total / pairs as f64
        }
    }
}

fn check_labels(features: &Matrix, labels: &[usize], num_classes: usize) -> Result<()> {
    if features.rows() != labels.len() {
        return Err(shape_err!("{} feature rows but {} labels", features.rows(), labels.len()));
    }
    if let Some(l) = labels.iter().find(|&&l| l >= num_classes) {
        return Err(Error::Validation(format!("label {l} out of range for {num_classes} classes")));
    }
    Ok(())
}

/// Row indices grouped by label.
pub fn members_by_class(labels: &[usize], num_classes: usize) -> Vec<Vec<usize>> {
    let mut m = vec![Vec::new(); num_classes];
    for (i, &l) in labels.iter().enumerate() {
        m[l].push(i);
    }
    m
}

pub fn class_centroids(features: &Matrix, labels: &[usize], num_classes: usize) -> Result<SideCentroids> {
    check_labels(features, labels, num_classes)?;
    let members = members_by_class(labels, num_classes);
    Ok(SideCentroids {
        centroids: members.iter().map(|idx| mean_of_rows(features, idx)).collect(),
        counts: members.iter().map(Vec::len).collect(),
    })
}

/// Softmax over negative squared distances to the present centroids. Absent
/// classes get probability zero.
pub fn prototype_probs(feature: &[f64], centroids: &SideCentroids) -> Result<Vec<f64>> {
    let dists: Vec<Option<f64>> = centroids
        .centroids
        .iter()
        .map(|c| c.as_ref().map(|c| sq_dist(feature, c)))
        .collect();
    softmax_neg(&dists).ok_or_else(|| Error::State("no class centroid present".into()))
}

fn softmax_neg(dists: &[Option<f64>]) -> Option<Vec<f64>> {
    let dmin = dists.iter().flatten().copied().fold(f64::INFINITY, f64::min);
    if !dmin.is_finite() {
        return None;
    }
    let mut p: Vec<f64> = dists.iter().map(|d| d.map_or(0.0, |d| (dmin - d).exp())).collect();
    let z: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= z);
    Some(p)
}

/// Mean over `queries` of `-log p(y | f)` with centroids taken over all rows of
/// `features`. The gradient covers both the query rows and every centroid member.
pub fn class_ce_loss(features: &Matrix, labels: &[usize], queries: &[usize], num_classes: usize) -> Result<Loss> {
    check_labels(features, labels, num_classes)?;
    let dim = features.cols();
    let mut grad = Matrix::zeros(features.rows(), dim);
    if queries.is_empty() {
        return Ok(Loss { value: 0.0, grad });
    }
    if let Some(q) = queries.iter().find(|&&q| q >= features.rows()) {
        return Err(shape_err!("query row {q} out of range"));
    }
    let members = members_by_class(labels, num_classes);
    let cents: Vec<Option<Vec<f64>>> = members.iter().map(|idx| mean_of_rows(features, idx)).collect();
    let inv_q = 1.0 / queries.len() as f64;
    let mut grad_c = vec![vec![0.0; dim]; num_classes];
    let mut total = 0.0;
    let mut diff = vec![0.0; dim];
    for &q in queries {
        let f = features.row(q);
        let y = labels[q];
        let dists: Vec<Option<f64>> = cents.iter().map(|c| c.as_ref().map(|c| sq_dist(f, c))).collect();
        let p = softmax_neg(&dists).expect("query class has a centroid");
        // -log p_y = d_y - d_min + log sum_n exp(d_min - d_n)
        let dmin = dists.iter().flatten().copied().fold(f64::INFINITY, f64::min);
        let z: f64 = dists.iter().flatten().map(|d| (dmin - d).exp()).sum();
        total += dists[y].expect("query class has a centroid") - dmin + z.ln();
        for n in 0..num_classes {
            let Some(c) = &cents[n] else { continue };
            let coeff = (if n == y { 1.0 } else { 0.0 }) - p[n];
            if coeff == 0.0 {
                continue;
            }
            for ((d, fi), ci) in diff.iter_mut().zip(f).zip(c) {
                *d = 2.0 * (fi - ci);
            }
            axpy(coeff * inv_q, &diff, grad.row_mut(q));
            axpy(-coeff * inv_q, &diff, &mut grad_c[n]);
        }
    }
    distribute(&mut grad, &members, &grad_c);
    Ok(Loss { value: total * inv_q, grad })
}

/// Adds `grad_c[n] / M_n` to every member row of class `n`.
fn distribute(grad: &mut Matrix, members: &[Vec<usize>], grad_c: &[Vec<f64>]) {
    for (idx, gc) in members.iter().zip(grad_c) {
        if idx.is_empty() {
            continue;
        }
        let w = 1.0 / idx.len() as f64;
        for &i in idx {
            axpy(w, gc, grad.row_mut(i));
        }
    }
}

/// Nearest present source centroid per row; ties go to the lowest class index.
pub fn pseudo_label(targets: &Matrix, source: &SideCentroids) -> Result<Vec<usize>> {
    if source.present() == 0 {
        return Err(Error::State("no source centroid present".into()));
    }
    Ok(targets.row_iter().map(|f| nearest(f, &source.centroids).expect("present")).collect())
}

/// Class matching loss and its gradients over source rows and target rows.
/// Classes missing on either side are skipped; the average runs over the rest.
pub fn class_match_loss(
    source: &Matrix,
    source_labels: &[usize],
    target: &Matrix,
    target_labels: &[usize],
    num_classes: usize,
) -> Result<(f64, Matrix, Matrix)> {
    check_labels(source, source_labels, num_classes)?;
    check_labels(target, target_labels, num_classes)?;
    let sm = members_by_class(source_labels, num_classes);
    let tm = members_by_class(target_labels, num_classes);
    let dim = source.cols();
    let mut gs = Matrix::zeros(source.rows(), dim);
    let mut gt = Matrix::zeros(target.rows(), dim);
    let pairs: Vec<(usize, Vec<f64>, Vec<f64>)> = (0..num_classes)
        .filter_map(|n| Some((n, mean_of_rows(source, &sm[n])?, mean_of_rows(target, &tm[n])?)))
        .collect();
    if pairs.is_empty() {
        return Ok((0.0, gs, gt));
    }
    let inv = 1.0 / pairs.len() as f64;
    let mut value = 0.0;
    let mut gcs = vec![vec![0.0; dim]; num_classes];
    let mut gct = vec![vec![0.0; dim]; num_classes];
    for (n, cs, ct) in &pairs {
        value += sq_dist(cs, ct) * inv;
        for j in 0..dim {
            let g = 2.0 * (cs[j] - ct[j]) * inv;
            gcs[*n][j] = g;
            gct[*n][j] = -g;
        }
    }
    distribute(&mut gs, &sm, &gcs);
    distribute(&mut gt, &tm, &gct);
    Ok((value, gs, gt))
}

/// Class-level compactness toward `c_st = (c_s + c_t)/2`: per class the mean
/// squared distance of source members plus that of target members, averaged over
/// classes with source members. With no target members `c_st = c_s` and the target
/// term is dropped.
pub fn class_compactness_loss(
    source: &Matrix,
    source_labels: &[usize],
    target: &Matrix,
    target_labels: &[usize],
    num_classes: usize,
) -> Result<(f64, Matrix, Matrix)> {
    check_labels(source, source_labels, num_classes)?;
    check_labels(target, target_labels, num_classes)?;
    let sm = members_by_class(source_labels, num_classes);
    let tm = members_by_class(target_labels, num_classes);
    let dim = source.cols();
    let mut gs = Matrix::zeros(source.rows(), dim);
    let mut gt = Matrix::zeros(target.rows(), dim);
    let active: Vec<usize> = (0..num_classes).filter(|&n| !sm[n].is_empty()).collect();
    if active.is_empty() {
        return Ok((0.0, gs, gt));
    }
    let inv_n = 1.0 / active.len() as f64;
    let mut value = 0.0;
    for &n in &active {
        let cs = mean_of_rows(source, &sm[n]).unwrap();
        let ct = mean_of_rows(target, &tm[n]);
        let center: Vec<f64> = match &ct {
            Some(ct) => cs.iter().zip(ct).map(|(a, b)| 0.5 * (a + b)).collect(),
            None => cs.clone(),
        };
        // d/d center of each term, collected to route through the centroids.
        let mut g_center = vec![0.0; dim];
        let ms = sm[n].len() as f64;
        for &i in &sm[n] {
            let f = source.row(i);
            value += inv_n * sq_dist(f, &center) / ms;
            for j in 0..dim {
                let g = inv_n * 2.0 * (f[j] - center[j]) / ms;
                gs[(i, j)] += g;
                g_center[j] -= g;
            }
        }
        if ct.is_some() {
            let mt = tm[n].len() as f64;
            for &i in &tm[n] {
                let f = target.row(i);
                value += inv_n * sq_dist(f, &center) / mt;
                for j in 0..dim {
                    let g = inv_n * 2.0 * (f[j] - center[j]) / mt;
                    gt[(i, j)] += g;
                    g_center[j] -= g;
                }
            }
            for &i in &sm[n] {
                axpy(0.5 / ms, &g_center, gs.row_mut(i));
            }
            for &i in &tm[n] {
                axpy(0.5 / mt, &g_center, gt.row_mut(i));
            }
        } else {
            for &i in &sm[n] {
                axpy(1.0 / ms, &g_center, gs.row_mut(i));
            }
        }
    }
    Ok((value, gs, gt))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(rows, rows[0].len()).unwrap()
    }

    #[test]
    fn centroid_is_mean_and_absent_when_empty() {
        let f = m(&[&[0., 0.], &[2., 0.], &[1., 3.]]);
        let c = class_centroids(&f, &[0, 0, 0], 2).unwrap();
        assert_eq!(c.centroids[0], Some(vec![1.0, 1.0]));
        assert_eq!(c.centroids[1], None);
        assert_eq!(c.counts, vec![3, 0]);
        let single = class_centroids(&f, &[0, 1, 0], 2).unwrap();
        assert_eq!(single.centroids[1], Some(vec![2.0, 0.0]));
        assert!(class_centroids(&f, &[0, 5, 0], 2).is_err());
    }

    fn cents(cs: &[Option<Vec<f64>>]) -> SideCentroids {
        SideCentroids { centroids: cs.to_vec(), counts: cs.iter().map(|c| c.is_some() as usize).collect() }
    }

    #[test]
    fn probs_equidistant_and_known_value() {
        let c = cents(&[Some(vec![0., 0.]), Some(vec![2., 0.])]);
        let p = prototype_probs(&[1.0, 5.0], &c).unwrap();
        assert!((p[0] - 0.5).abs() < 1e-15 && (p[1] - 0.5).abs() < 1e-15);
        let p = prototype_probs(&[0.0, 0.0], &c).unwrap();
        let e = (-4f64).exp();
        assert!((p[0] - 1.0 / (1.0 + e)).abs() < 1e-15);
        assert!((p[0] - 0.98201).abs() < 1e-5 && (p[1] - 0.01799).abs() < 1e-5);
        assert!(matches!(prototype_probs(&[0.0], &cents(&[None])), Err(Error::State(_))));
    }

    #[test]
    fn ce_equidistant_is_ln2() {
        // Two queries on the perpendicular bisector; centroids are fixed by the
        // other members, symmetric around x = 1.
        let f = m(&[&[1., 0.], &[1., 0.], &[-1., 0.], &[3., 0.]]);
        let labels = [0, 1, 0, 1];
        let loss = class_ce_loss(&f, &labels, &[0], 2).unwrap();
        assert!((loss.value - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn ce_at_own_centroid_with_far_rival_vanishes() {
        let f = m(&[&[0., 0.], &[10., 0.]]);
        let loss = class_ce_loss(&f, &[0, 1], &[0], 2).unwrap();
        assert!(loss.value.abs() < 1e-12 && loss.value >= 0.0);
        assert!(class_ce_loss(&f, &[0, 2], &[0], 2).is_err());
    }

    #[test]
    fn pseudo_labels_nearest_with_low_tie_break() {
        let c = cents(&[Some(vec![0., 0.]), Some(vec![2., 0.])]);
        let t = m(&[&[0.9, 0.], &[1.0, 0.], &[1.2, 0.]]);
        assert_eq!(pseudo_label(&t, &c).unwrap(), vec![0, 0, 1]);
        let c3 = cents(&[Some(vec![0.]), None, Some(vec![4.])]);
        assert_eq!(pseudo_label(&m(&[&[1.9], &[2.1]]), &c3).unwrap(), vec![0, 2]);
    }

    #[test]
    fn match_loss_values_and_skip_rule() {
        let s = m(&[&[0., 0.]]);
        let t = m(&[&[3., 4.]]);
        let (v, _, _) = class_match_loss(&s, &[0], &t, &[0], 1).unwrap();
        assert_eq!(v, 25.0);
        let (v, _, _) = class_match_loss(&s, &[0], &s, &[0], 1).unwrap();
        assert_eq!(v, 0.0);
        // Class 1 has no target samples: only class 0 counts.
        let s2 = m(&[&[0., 0.], &[7., 7.]]);
        let (v, _, gt) = class_match_loss(&s2, &[0, 1], &t, &[0], 2).unwrap();
        assert_eq!(v, 25.0);
        assert_eq!(gt.row(0), &[6.0, 8.0]);
        let cc = ClassCentroids {
            source: class_centroids(&s2, &[0, 1], 2).unwrap(),
            target: class_centroids(&t, &[0], 2).unwrap(),
        };
        assert_eq!(cc.match_loss(), 25.0);
    }

    #[test]
    fn empty_match_set_is_zero() {
        let s = m(&[&[0., 0.]]);
        let t = m(&[&[3., 4.]]);
        let (v, gs, gt) = class_match_loss(&s, &[0], &t, &[1], 2).unwrap();
        assert_eq!(v, 0.0);
        assert!(gs.as_slice().iter().chain(gt.as_slice()).all(|x| *x == 0.0));
    }
}
