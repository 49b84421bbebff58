use std::collections::VecDeque;

/// 26-connected components of a `z`-major binary grid, each as a sorted list
/// of flat indices. Components are ordered by their first voxel.
pub fn label_components(mask: &[u8], dims: [usize; 3]) -> Vec<Vec<usize>> {
    let [d, h, w] = dims;
    let mut seen = vec![false; mask.len()];
    let mut out = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..mask.len() {
        if mask[start] == 0 || seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut comp = Vec::new();
        while let Some(i) = queue.pop_front() {
            comp.push(i);
            let (z, y, x) = (i / (h * w), (i / w) % h, i % w);
            for z2 in z.saturating_sub(1)..=(z + 1).min(d - 1) {
                for y2 in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                    for x2 in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                        let j = (z2 * h + y2) * w + x2;
                        if mask[j] != 0 && !seen[j] {
                            seen[j] = true;
                            queue.push_back(j);
                        }
                    }
                }
            }
        }
        comp.sort_unstable();
        out.push(comp);
    }
    out
}

/// 8-connected components of one slice.
pub fn label_components_2d(slice: &[u8], dims: [usize; 2]) -> Vec<Vec<usize>> {
    label_components(slice, [1, dims[0], dims[1]])
}

/// Mean `(z, y, x)` of flat indices.
pub fn centroid(indices: &[usize], dims: [usize; 3]) -> [f64; 3] {
    let [_, h, w] = dims;
    let mut s = [0.0; 3];
    for &i in indices {
        s[0] += (i / (h * w)) as f64;
        s[1] += ((i / w) % h) as f64;
        s[2] += (i % w) as f64;
    }
    s.map(|v| v / indices.len() as f64)
}
