/// Static 2-D k-d tree over a point set, for nearest-other-point queries.
pub struct KdTree<'a> {
    points: &'a [(f64, f64)],
    /// Point indices laid out as an implicit balanced tree (median at the middle).
    order: Vec<usize>,
}

impl<'a> KdTree<'a> {
    pub fn new(points: &'a [(f64, f64)]) -> Self {
        let mut order: Vec<usize> = (0..points.len()).collect();
        build(points, &mut order, 0);
        Self { points, order }
    }

    /// Distance from point `i` to the closest other point, `None` for a
    /// single-point set.
    pub fn nearest_other_distance(&self, i: usize) -> Option<f64> {
        let mut best = f64::INFINITY;
        self.search(&self.order, 0, i, &mut best);
        best.is_finite().then(|| best.sqrt())
    }

    fn search(&self, nodes: &[usize], depth: usize, query: usize, best: &mut f64) {
        if nodes.is_empty() {
            return;
        }
        let mid = nodes.len() / 2;
        let node = nodes[mid];
        let q = self.points[query];
        let p = self.points[node];
        if node != query {
            let d2 = (p.0 - q.0).powi(2) + (p.1 - q.1).powi(2);
            if d2 < *best {
                *best = d2;
            }
        }
        let diff = if depth % 2 == 0 { q.0 - p.0 } else { q.1 - p.1 };
        let (near, far) = if diff < 0.0 {
            (&nodes[..mid], &nodes[mid + 1..])
        } else {
            (&nodes[mid + 1..], &nodes[..mid])
        };
        self.search(near, depth + 1, query, best);
        if diff * diff < *best {
            self.search(far, depth + 1, query, best);
        }
    }
}

fn build(points: &[(f64, f64)], idx: &mut [usize], depth: usize) {
    if idx.len() <= 1 {
        return;
    }
    let key = |i: &usize| if depth % 2 == 0 { points[*i].0 } else { points[*i].1 };
    let mid = idx.len() / 2;
    idx.select_nth_unstable_by(mid, |a, b| key(a).total_cmp(&key(b)));
    let (left, right) = idx.split_at_mut(mid);
    build(points, left, depth + 1);
    build(points, &mut right[1..], depth + 1);
}
