//! Skeleton graph: 133 → 27 node reduction, hop-distance adjacency,
//! symmetric normalization with self-loops and spatial partitioning, and
//! depth attachment for 3D node features.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SlrError};
use crate::keypoints::{DepthMap, KeypointSequence, WHOLE_BODY_LANDMARKS};
use crate::numeric::NdArray;

/// Number of nodes in the reduced graph.
pub const REDUCED_NODE_COUNT: usize = 27;

/// The reduced node set as `(name, whole-body landmark index)`.
///
/// Body: nose, eyes, shoulders, elbows. Each hand: wrist, thumb tip, and the
/// knuckle plus tip of the index, middle, ring and little fingers. Whole-body
/// indices follow the 133-point layout (0-16 body, 17-22 feet, 23-90 face,
/// 91-111 left hand, 112-132 right hand).
pub const REDUCED_NODES: [(&str, usize); REDUCED_NODE_COUNT] = [
    ("nose", 0),
    ("left_eye", 1),
    ("right_eye", 2),
    ("left_shoulder", 5),
    ("right_shoulder", 6),
    ("left_elbow", 7),
    ("right_elbow", 8),
    ("left_wrist", 91),
    ("left_thumb_tip", 95),
    ("left_index_knuckle", 96),
    ("left_index_tip", 99),
    ("left_middle_knuckle", 100),
    ("left_middle_tip", 103),
    ("left_ring_knuckle", 104),
    ("left_ring_tip", 107),
    ("left_pinky_knuckle", 108),
    ("left_pinky_tip", 111),
    ("right_wrist", 112),
    ("right_thumb_tip", 116),
    ("right_index_knuckle", 117),
    ("right_index_tip", 120),
    ("right_middle_knuckle", 121),
    ("right_middle_tip", 124),
    ("right_ring_knuckle", 125),
    ("right_ring_tip", 128),
    ("right_pinky_knuckle", 129),
    ("right_pinky_tip", 132),
];

/// Parent of every reduced node in the bone tree rooted at the nose.
pub const REDUCED_PARENTS: [Option<usize>; REDUCED_NODE_COUNT] = [
    None,
    Some(0),
    Some(0),
    Some(0),
    Some(0),
    Some(3),
    Some(4),
    Some(5),
    Some(7),
    Some(7),
    Some(9),
    Some(7),
    Some(11),
    Some(7),
    Some(13),
    Some(7),
    Some(15),
    Some(6),
    Some(17),
    Some(17),
    Some(19),
    Some(17),
    Some(21),
    Some(17),
    Some(23),
    Some(17),
    Some(25),
];

/// Left/right node pairs swapped by horizontal mirroring.
pub const MIRROR_PAIRS: [(usize, usize); 13] = [
    (1, 2),
    (3, 4),
    (5, 6),
    (7, 17),
    (8, 18),
    (9, 19),
    (10, 20),
    (11, 21),
    (12, 22),
    (13, 23),
    (14, 24),
    (15, 25),
    (16, 26),
];

/// Canonical resting pose of the reduced graph in normalized image
/// coordinates (x to the image right, y down). Used only to decide which
/// neighbors are closer to the gravity center for spatial partitioning.
pub const REFERENCE_POSE: [[f64; 2]; REDUCED_NODE_COUNT] = [
    [0.0, -0.55],
    [0.07, -0.62],
    [-0.07, -0.62],
    [0.35, -0.2],
    [-0.35, -0.2],
    [0.45, 0.25],
    [-0.45, 0.25],
    [0.3, 0.45],
    [0.38, 0.5],
    [0.31, 0.55],
    [0.31, 0.68],
    [0.28, 0.56],
    [0.27, 0.7],
    [0.25, 0.55],
    [0.23, 0.67],
    [0.22, 0.53],
    [0.19, 0.62],
    [-0.3, 0.45],
    [-0.38, 0.5],
    [-0.31, 0.55],
    [-0.31, 0.68],
    [-0.28, 0.56],
    [-0.27, 0.7],
    [-0.25, 0.55],
    [-0.23, 0.67],
    [-0.22, 0.53],
    [-0.19, 0.62],
];

/// Whole-body landmark indices of the reduced nodes, in node order.
pub fn reduced_indices() -> [usize; REDUCED_NODE_COUNT] {
    REDUCED_NODES.map(|(_, i)| i)
}

/// Node permutation implementing the left/right swap.
pub fn mirror_permutation() -> [usize; REDUCED_NODE_COUNT] {
    let mut perm: [usize; REDUCED_NODE_COUNT] = std::array::from_fn(|i| i);
    for (a, b) in MIRROR_PAIRS {
        perm[a] = b;
        perm[b] = a;
    }
    perm
}

/// Undirected skeleton graph.
#[derive(Clone, Debug, PartialEq)]
pub struct SkeletonGraph {
    node_count: usize,
    /// Unordered pairs stored with the smaller index first.
    edges: Vec<(usize, usize)>,
    labels: Vec<String>,
    root: usize,
}

impl SkeletonGraph {
    pub fn new(node_count: usize, edges: &[(usize, usize)], root: usize) -> Result<Self> {
        if node_count == 0 || root >= node_count {
            return Err(SlrError::Validation(format!(
                "invalid graph: {node_count} nodes, root {root}"
            )));
        }
        let mut norm: Vec<(usize, usize)> = Vec::with_capacity(edges.len());
        for &(a, b) in edges {
            if a >= node_count || b >= node_count {
                return Err(SlrError::Validation(format!(
                    "edge ({a}, {b}) out of range"
                )));
            }
            if a == b {
                return Err(SlrError::Validation(format!("self-loop at node {a}")));
            }
            let e = (a.min(b), a.max(b));
            if norm.contains(&e) {
                return Err(SlrError::Validation(format!("duplicate edge ({a}, {b})")));
            }
            norm.push(e);
        }
        Ok(SkeletonGraph {
            node_count,
            edges: norm,
            labels: (0..node_count).map(|i| format!("node{i}")).collect(),
            root,
        })
    }

    /// The 27-node graph with its natural body connections.
    pub fn reduced() -> Self {
        let edges: Vec<(usize, usize)> = REDUCED_PARENTS
            .iter()
            .enumerate()
            .filter_map(|(c, p)| p.map(|p| (p, c)))
            .collect();
        let mut g = SkeletonGraph::new(REDUCED_NODE_COUNT, &edges, 0).expect("reduced graph");
        g.labels = REDUCED_NODES.iter().map(|(n, _)| n.to_string()).collect();
        g
    }

    pub fn with_labels(mut self, labels: Vec<String>) -> Result<Self> {
        if labels.len() != self.node_count {
            return Err(SlrError::Validation(
                "label count differs from node count".into(),
            ));
        }
        self.labels = labels;
        Ok(self)
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn root(&self) -> usize {
        self.root
    }

    fn neighbors(&self) -> Vec<Vec<usize>> {
        let mut nb = vec![Vec::new(); self.node_count];
        for &(a, b) in &self.edges {
            nb[a].push(b);
            nb[b].push(a);
        }
        nb
    }

    /// Shortest-path hop counts from `src`; `None` for unreachable nodes.
    pub fn hop_distances_from(&self, src: usize) -> Vec<Option<usize>> {
        let nb = self.neighbors();
        let mut dist = vec![None; self.node_count];
        dist[src] = Some(0);
        let mut queue = VecDeque::from([src]);
        while let Some(u) = queue.pop_front() {
            let du = dist[u].unwrap();
            for &v in &nb[u] {
                if dist[v].is_none() {
                    dist[v] = Some(du + 1);
                    queue.push_back(v);
                }
            }
        }
        dist
    }

    pub fn is_connected(&self) -> bool {
        self.hop_distances_from(0).iter().all(Option::is_some)
    }

    /// Binary adjacency: `A[i][j] = 1` iff the hop distance between `i` and
    /// `j` is exactly 1.
    pub fn build_adjacency(&self) -> Result<NdArray> {
        if !self.is_connected() {
            return Err(SlrError::Validation(
                "skeleton graph is disconnected".into(),
            ));
        }
        let v = self.node_count;
        let mut a = NdArray::zeros(&[v, v]);
        for i in 0..v {
            for (j, d) in self.hop_distances_from(i).into_iter().enumerate() {
                if d == Some(1) {
                    a.set(&[i, j], 1.0);
                }
            }
        }
        Ok(a)
    }

    /// Parent of every node when the edges are oriented away from the root.
    /// Fails unless the graph is a tree.
    pub fn bone_parents(&self) -> Result<Vec<Option<usize>>> {
        if self.edges.len() + 1 != self.node_count || !self.is_connected() {
            return Err(SlrError::Validation(
                "bone derivation needs a tree spanning every node".into(),
            ));
        }
        let nb = self.neighbors();
        let mut parent = vec![None; self.node_count];
        let mut seen = vec![false; self.node_count];
        seen[self.root] = true;
        let mut queue = VecDeque::from([self.root]);
        while let Some(u) = queue.pop_front() {
            for &v in &nb[u] {
                if !seen[v] {
                    seen[v] = true;
                    parent[v] = Some(u);
                    queue.push_back(v);
                }
            }
        }
        Ok(parent)
    }

    /// Normalized adjacency split by the chosen partitioning. `reference`
    /// supplies node coordinates for spatial partitioning.
    pub fn normalized_adjacency(
        &self,
        strategy: Partitioning,
        reference: Option<&[[f64; 2]]>,
    ) -> Result<NormalizedAdjacency> {
        let a = self.build_adjacency()?;
        let full = normalize_adjacency(&a)?;
        match strategy {
            Partitioning::Uniform => Ok(NormalizedAdjacency {
                partitions: vec![full],
            }),
            Partitioning::Spatial => {
                let coords = reference.ok_or_else(|| {
                    SlrError::Config("spatial partitioning needs reference coordinates".into())
                })?;
                spatial_partition(&full, coords)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Partitioning {
    /// One subset holding the whole normalized matrix.
    Uniform,
    /// Self, centripetal and centrifugal subsets.
    #[default]
    Spatial,
}

impl Partitioning {
    pub fn subsets(self) -> usize {
        match self {
            Partitioning::Uniform => 1,
            Partitioning::Spatial => 3,
        }
    }
}

/// `D^{-1/2} (A + I) D^{-1/2}` with `D` the degree matrix of `A + I`.
pub fn normalize_adjacency(a: &NdArray) -> Result<NdArray> {
    let s = a.shape();
    if s.len() != 2 || s[0] != s[1] {
        return Err(SlrError::dim("normalize_adjacency", s, &[s[0], s[0]]));
    }
    let v = s[0];
    for i in 0..v {
        if a.get(&[i, i]) != 0.0 {
            return Err(SlrError::Validation(format!(
                "non-zero diagonal at node {i}"
            )));
        }
        for j in 0..i {
            if a.get(&[i, j]) != a.get(&[j, i]) {
                return Err(SlrError::Validation(format!("asymmetric entry ({i}, {j})")));
            }
        }
    }
    let with_self = NdArray::from_fn(&[v, v], |o| {
        let (i, j) = (o / v, o % v);
        a.data()[o] + if i == j { 1.0 } else { 0.0 }
    });
    let inv_sqrt: Vec<f64> = (0..v)
        .map(|i| 1.0 / with_self.row(i).iter().sum::<f64>().sqrt())
        .collect();
    Ok(NdArray::from_fn(&[v, v], |o| {
        let (i, j) = (o / v, o % v);
        inv_sqrt[i] * with_self.data()[o] * inv_sqrt[j]
    }))
}

/// Per-partition `V × V` matrices whose sum is the normalized adjacency.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedAdjacency {
    pub partitions: Vec<NdArray>,
}

impl NormalizedAdjacency {
    pub fn node_count(&self) -> usize {
        self.partitions[0].shape()[0]
    }

    pub fn total(&self) -> NdArray {
        let mut out = NdArray::zeros(self.partitions[0].shape());
        for p in &self.partitions {
            out.axpy(1.0, p);
        }
        out
    }

    /// Stack as `[P, V, V]`.
    pub fn stacked(&self) -> NdArray {
        let v = self.node_count();
        let data = self
            .partitions
            .iter()
            .flat_map(|p| p.data().iter().copied())
            .collect();
        NdArray::new(&[self.partitions.len(), v, v], data).expect("stacked adjacency")
    }
}

/// Split `full` into self / centripetal / centrifugal subsets. Row `i` is the
/// aggregating node; neighbor `j` is centripetal when it lies closer to the
/// gravity center (mean of `coords`) than `i`, centrifugal when farther, and
/// joins the self subset on a tie.
pub fn spatial_partition(full: &NdArray, coords: &[[f64; 2]]) -> Result<NormalizedAdjacency> {
    let v = full.shape()[0];
    if coords.len() != v {
        return Err(SlrError::Config(format!(
            "{} reference coordinates for {v} nodes",
            coords.len()
        )));
    }
    let cx = coords.iter().map(|c| c[0]).sum::<f64>() / v as f64;
    let cy = coords.iter().map(|c| c[1]).sum::<f64>() / v as f64;
    let r: Vec<f64> = coords
        .iter()
        .map(|c| (c[0] - cx).hypot(c[1] - cy))
        .collect();
    let mut parts = vec![NdArray::zeros(&[v, v]); 3];
    for i in 0..v {
        for j in 0..v {
            let e = full.get(&[i, j]);
            if e == 0.0 {
                continue;
            }
            let k = if i == j || r[j] == r[i] {
                0
            } else if r[j] < r[i] {
                1
            } else {
                2
            };
            parts[k].set(&[i, j], e);
        }
    }
    Ok(NormalizedAdjacency { partitions: parts })
}

/// Select the 27 reduced landmarks from a whole-body sequence.
pub fn reduce_graph(seq: &KeypointSequence) -> Result<KeypointSequence> {
    if seq.landmarks() != WHOLE_BODY_LANDMARKS {
        return Err(SlrError::format(
            0,
            format!(
                "expected {WHOLE_BODY_LANDMARKS} landmarks per frame, got {}",
                seq.landmarks()
            ),
        ));
    }
    Ok(seq.select_landmarks(&reduced_indices()))
}

/// Raw depth at pixel `(x, y)`: nearest pixel with the coordinates clamped to
/// the map. A zero (masked) pixel falls back to the median of the non-zero
/// values in its 5×5 neighborhood, or 0 when there are none.
pub fn sample_depth(map: &DepthMap, x: f64, y: f64) -> f64 {
    let clamp = |v: f64, n: usize| -> usize {
        if !v.is_finite() || v <= 0.0 {
            0
        } else {
            (v.round() as usize).min(n - 1)
        }
    };
    let (px, py) = (clamp(x, map.width), clamp(y, map.height));
    let z = map.at(px, py);
    if z != 0.0 {
        return z;
    }
    let mut vals = Vec::with_capacity(25);
    for yy in py.saturating_sub(2)..=(py + 2).min(map.height - 1) {
        for xx in px.saturating_sub(2)..=(px + 2).min(map.width - 1) {
            let d = map.at(xx, yy);
            if d != 0.0 {
                vals.push(d);
            }
        }
    }
    median(&mut vals).unwrap_or(0.0)
}

fn median(vals: &mut [f64]) -> Option<f64> {
    if vals.is_empty() {
        return None;
    }
    vals.sort_by(|a, b| a.total_cmp(b));
    let n = vals.len();
    Some(if n % 2 == 1 {
        vals[n / 2]
    } else {
        0.5 * (vals[n / 2 - 1] + vals[n / 2])
    })
}

/// Linear-interpolated percentile of sorted values, `q` in `[0, 1]`.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Scale raw depths to `[-1, 1]` using the 1st and 99th percentiles of the
/// sampled values; values beyond the percentiles are clamped. A degenerate
/// range maps everything to 0.
pub fn normalize_depths(raw: &[f64]) -> Vec<f64> {
    if raw.is_empty() {
        return Vec::new();
    }
    let mut sorted = raw.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let lo = percentile(&sorted, 0.01);
    let hi = percentile(&sorted, 0.99);
    let span = hi - lo;
    raw.iter()
        .map(|&z| {
            if span <= 0.0 {
                0.0
            } else {
                (2.0 * (z - lo) / span - 1.0).clamp(-1.0, 1.0)
            }
        })
        .collect()
}

/// Turn an `(x, y, s)` sequence with depth maps into `(x, y, z, s)`.
pub fn attach_depth(seq: &KeypointSequence) -> Result<KeypointSequence> {
    let maps = seq
        .depth
        .as_ref()
        .ok_or_else(|| SlrError::Mode("no depth maps attached; use the 2d pipeline".into()))?;
    if seq.is_3d() {
        return Err(SlrError::Mode("sequence already carries depth".into()));
    }
    let (t, l) = (seq.frames(), seq.landmarks());
    let mut raw = Vec::with_capacity(t * l);
    for (f, map) in maps.iter().enumerate() {
        for j in 0..l {
            raw.push(sample_depth(map, seq.get(f, j, 0), seq.get(f, j, 1)));
        }
    }
    let z = normalize_depths(&raw);
    let mut data = Vec::with_capacity(t * l * 4);
    for f in 0..t {
        for j in 0..l {
            let p = seq.landmark(f, j);
            data.extend_from_slice(&[p[0], p[1], z[f * l + j], p[2]]);
        }
    }
    Ok(KeypointSequence::from_parts(t, l, 4, data, seq.frame_size))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reduced_graph_is_a_spanning_tree() {
        let g = SkeletonGraph::reduced();
        assert_eq!(g.node_count(), 27);
        assert_eq!(g.edges().len(), 26);
        assert!(g.is_connected());
        assert_eq!(g.bone_parents().unwrap(), REDUCED_PARENTS.to_vec());
    }

    #[test]
    fn reduced_indices_are_distinct_whole_body_landmarks() {
        let mut idx = reduced_indices().to_vec();
        assert!(idx.iter().all(|&i| i < WHOLE_BODY_LANDMARKS));
        idx.sort();
        idx.dedup();
        assert_eq!(idx.len(), 27);
    }

    #[test]
    fn mirror_pairs_respect_the_tree() {
        let perm = mirror_permutation();
        for (c, p) in REDUCED_PARENTS.iter().enumerate() {
            assert_eq!(REDUCED_PARENTS[perm[c]], p.map(|p| perm[p]));
        }
    }

    #[test]
    fn two_node_adjacency() {
        let g = SkeletonGraph::new(2, &[(0, 1)], 0).unwrap();
        assert_eq!(g.build_adjacency().unwrap().data(), &[0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn disconnected_graph_is_rejected() {
        let g = SkeletonGraph::new(3, &[(0, 1)], 0).unwrap();
        assert!(matches!(g.build_adjacency(), Err(SlrError::Validation(_))));
        assert!(SkeletonGraph::new(2, &[(1, 1)], 0).is_err());
    }

    #[test]
    fn hand_root_degree() {
        // wrist connects to elbow, thumb tip and four knuckles
        let a = SkeletonGraph::reduced().build_adjacency().unwrap();
        assert_eq!(a.row(7).iter().sum::<f64>(), 6.0);
        assert_eq!(a.row(17).iter().sum::<f64>(), 6.0);
    }

    #[test]
    fn single_node_normalizes_to_one() {
        let n = normalize_adjacency(&NdArray::zeros(&[1, 1])).unwrap();
        assert_eq!(n.data(), &[1.0]);
    }

    #[test]
    fn path_graph_normalization() {
        let g = SkeletonGraph::new(3, &[(0, 1), (1, 2)], 0).unwrap();
        let n = normalize_adjacency(&g.build_adjacency().unwrap()).unwrap();
        assert!((n.get(&[0, 0]) - 0.5).abs() < 1e-12);
        assert!((n.get(&[1, 1]) - 1.0 / 3.0).abs() < 1e-12);
        assert!((n.get(&[0, 1]) - 1.0 / 6f64.sqrt()).abs() < 1e-12);
        assert_eq!(n.get(&[0, 2]), 0.0);
    }

    #[test]
    fn spatial_partitions_sum_to_full() {
        let g = SkeletonGraph::reduced();
        let parts = g
            .normalized_adjacency(Partitioning::Spatial, Some(&REFERENCE_POSE))
            .unwrap();
        assert_eq!(parts.partitions.len(), 3);
        let full = normalize_adjacency(&g.build_adjacency().unwrap()).unwrap();
        assert!(parts.total().max_abs_diff(&full) < 1e-12);
        assert!(parts
            .partitions
            .iter()
            .all(|p| p.data().iter().all(|&v| v >= 0.0)));
        // every subset non-trivial
        assert!(parts.partitions.iter().all(|p| p.sum() > 0.0));
    }

    #[test]
    fn depth_lookup_and_clamping() {
        let map = DepthMap::new(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(sample_depth(&map, 1.0, 1.0), 5.0);
        assert_eq!(sample_depth(&map, 1.4, 0.6), 5.0);
        assert_eq!(sample_depth(&map, 50.0, -3.0), 3.0);
        assert_eq!(sample_depth(&map, -1.0, 9.0), 4.0);
    }

    #[test]
    fn masked_depth_uses_neighborhood_median() {
        let mut data = vec![0.0; 25];
        data[0] = 2.0;
        data[1] = 4.0;
        data[2] = 9.0;
        let map = DepthMap::new(5, 5, data).unwrap();
        assert_eq!(sample_depth(&map, 2.0, 2.0), 4.0);
        assert_eq!(sample_depth(&DepthMap::constant(3, 3, 0.0), 1.0, 1.0), 0.0);
    }

    #[test]
    fn attach_depth_requires_maps() {
        let seq = KeypointSequence::new(1, 1, 3, vec![0.0, 0.0, 1.0], (4.0, 4.0)).unwrap();
        assert!(matches!(attach_depth(&seq), Err(SlrError::Mode(_))));
        let seq = seq.with_depth(vec![DepthMap::constant(4, 4, 5.0)]).unwrap();
        let d = attach_depth(&seq).unwrap();
        assert_eq!(d.landmark(0, 0), &[0.0, 0.0, 0.0, 1.0]);
    }
}
