//! Gray-code Sobol sequence in up to 20 dimensions (Joe-Kuo direction numbers).

const BITS: usize = 32;

/// (degree s, polynomial coefficients a, initial direction numbers m) for dimensions 2..=20.
const TABLE: [(u32, u32, &[u32]); 19] = [
    (1, 0, &[1]),
    (2, 1, &[1, 3]),
    (3, 1, &[1, 3, 1]),
    (3, 2, &[1, 1, 1]),
    (4, 1, &[1, 1, 3, 3]),
    (4, 4, &[1, 3, 5, 13]),
    (5, 2, &[1, 1, 5, 5, 17]),
    (5, 4, &[1, 1, 5, 5, 5]),
    (5, 7, &[1, 1, 7, 11, 19]),
    (5, 11, &[1, 1, 5, 1, 1]),
    (5, 13, &[1, 1, 1, 3, 11]),
    (5, 14, &[1, 3, 5, 5, 31]),
    (6, 1, &[1, 3, 3, 9, 7, 49]),
    (6, 13, &[1, 1, 1, 15, 21, 21]),
    (6, 16, &[1, 3, 1, 13, 27, 49]),
    (6, 19, &[1, 1, 1, 15, 7, 5]),
    (6, 22, &[1, 3, 1, 15, 13, 25]),
    (6, 25, &[1, 1, 5, 5, 19, 61]),
    (7, 1, &[1, 3, 7, 11, 23, 15, 103]),
];

pub const MAX_DIM: usize = TABLE.len() + 1;

fn directions(dim: usize) -> Vec<[u32; BITS]> {
    let mut out = Vec::with_capacity(dim);
    let mut first = [0u32; BITS];
    for (i, v) in first.iter_mut().enumerate() {
        *v = 1u32 << (31 - i);
    }
    out.push(first);
    for &(s, a, m) in TABLE.iter().take(dim.saturating_sub(1)) {
        let s = s as usize;
        let mut v = [0u32; BITS];
        for i in 0..BITS {
            if i < s {
                v[i] = m[i] << (31 - i);
            } else {
                let mut x = v[i - s] ^ (v[i - s] >> s);
                for k in 1..s {
                    if (a >> (s - 1 - k)) & 1 == 1 {
                        x ^= v[i - k];
                    }
                }
                v[i] = x;
            }
        }
        out.push(v);
    }
    out
}

/// First `n` points of the sequence, starting at the origin, as row-major coordinates.
pub fn sobol_points(n: usize, dim: usize) -> Vec<f64> {
    assert!(dim >= 1 && dim <= MAX_DIM, "sobol dimension must be in 1..={MAX_DIM}");
    let v = directions(dim);
    let mut x = vec![0u32; dim];
    let mut out = Vec::with_capacity(n * dim);
    let scale = 1.0 / (1u64 << 32) as f64;
    for i in 0..n {
        if i > 0 {
            let c = (!(i - 1)).trailing_zeros() as usize;
            for (xd, vd) in x.iter_mut().zip(&v) {
                *xd ^= vd[c];
            }
        }
        out.extend(x.iter().map(|&u| u as f64 * scale));
    }
    out
}
