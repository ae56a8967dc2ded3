//! Exact k-nearest-neighbour search.
//!
//! Neighbours are ordered by `(squared distance, reference index)`, so ties
//! always resolve to the lower index and the result matches an exhaustive
//! scan exactly.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rayon::prelude::*;

use super::{GeomError, Point3, PointCloud};
use crate::Real;

const LEAF_SIZE: usize = 8;
const PAR_QUERY_THRESHOLD: usize = 512;

#[derive(Debug, Clone)]
enum Node<T> {
    Leaf {
        start: usize,
        end: usize,
    },
    Split {
        axis: usize,
        value: T,
        left: usize,
        right: usize,
    },
}

/// Static kd-tree over a borrowed point slice.
#[derive(Debug, Clone)]
pub struct KdTree<'a, T> {
    points: &'a [Point3<T>],
    order: Vec<usize>,
    nodes: Vec<Node<T>>,
}

#[derive(Clone, Copy)]
struct Candidate<T> {
    d2: T,
    index: usize,
}

impl<T: Real> PartialEq for Candidate<T> {
    fn eq(&self, o: &Self) -> bool {
        self.cmp(o) == Ordering::Equal
    }
}

impl<T: Real> Eq for Candidate<T> {}

impl<T: Real> PartialOrd for Candidate<T> {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}

impl<T: Real> Ord for Candidate<T> {
    fn cmp(&self, o: &Self) -> Ordering {
        // distances are finite, so partial_cmp never fails
        self.d2
            .partial_cmp(&o.d2)
            .unwrap_or(Ordering::Equal)
            .then(self.index.cmp(&o.index))
    }
}

impl<'a, T: Real> KdTree<'a, T> {
    pub fn build(points: &'a [Point3<T>]) -> Self {
        let mut tree = Self {
            points,
            order: (0..points.len()).collect(),
            nodes: Vec::new(),
        };
        if !points.is_empty() {
            tree.build_node(0, points.len());
        }
        tree
    }

    fn build_node(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        if end - start <= LEAF_SIZE {
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let axis = self.widest_axis(start, end);
        let mid = start + (end - start) / 2;
        let pts = self.points;
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            pts[a]
                .axis(axis)
                .partial_cmp(&pts[b].axis(axis))
                .unwrap_or(Ordering::Equal)
                .then(a.cmp(&b))
        });
        let value = pts[self.order[mid]].axis(axis);
        self.nodes.push(Node::Leaf { start, end }); // placeholder
        let left = self.build_node(start, mid);
        let right = self.build_node(mid, end);
        self.nodes[id] = Node::Split {
            axis,
            value,
            left,
            right,
        };
        id
    }

    fn widest_axis(&self, start: usize, end: usize) -> usize {
        let mut lo = [T::infinity(); 3];
        let mut hi = [T::neg_infinity(); 3];
        for &i in &self.order[start..end] {
            for a in 0..3 {
                let v = self.points[i].axis(a);
                lo[a] = lo[a].min(v);
                hi[a] = hi[a].max(v);
            }
        }
        (0..3).fold(0, |best, a| {
            if hi[a] - lo[a] > hi[best] - lo[best] {
                a
            } else {
                best
            }
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Indices of the `k` nearest points, nearest first.
    pub fn nearest(&self, q: Point3<T>, k: usize) -> Vec<usize> {
        let k = k.min(self.points.len());
        if k == 0 {
            return Vec::new();
        }
        let mut heap = BinaryHeap::with_capacity(k + 1);
        self.search(0, q, k, &mut heap);
        heap.into_sorted_vec()
            .into_iter()
            .map(|c| c.index)
            .collect()
    }

    fn search(&self, node: usize, q: Point3<T>, k: usize, heap: &mut BinaryHeap<Candidate<T>>) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    let c = Candidate {
                        d2: q.dist_squared(self.points[i]),
                        index: i,
                    };
                    if heap.len() < k {
                        heap.push(c);
                    } else if c < *heap.peek().expect("heap holds k items") {
                        heap.pop();
                        heap.push(c);
                    }
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = q.axis(axis) - value;
                let (near, far) = if diff <= T::zero() {
                    (left, right)
                } else {
                    (right, left)
                };
                self.search(near, q, k, heap);
                // Equal plane distance must still be visited: a tie may hide a lower index.
                let visit_far = heap.len() < k || diff * diff <= heap.peek().expect("non-empty").d2;
                if visit_far {
                    self.search(far, q, k, heap);
                }
            }
        }
    }
}

/// For each query point, the indices of its `k` nearest reference points
/// sorted by ascending distance (ties to the lower index).
pub fn knn<T: Real>(
    query: &PointCloud<T>,
    reference: &PointCloud<T>,
    k: usize,
) -> Result<Vec<Vec<usize>>, GeomError> {
    if k > reference.len() {
        return Err(GeomError::KTooLarge {
            k,
            available: reference.len(),
        });
    }
    let tree = KdTree::build(reference.points());
    let qs = query.points();
    Ok(if qs.len() >= PAR_QUERY_THRESHOLD {
        qs.par_iter().map(|&q| tree.nearest(q, k)).collect()
    } else {
        qs.iter().map(|&q| tree.nearest(q, k)).collect()
    })
}
