//! Batched sparse coordinate layouts and convolution kernel maps.
//!
//! Keys are `[batch, x, y, z]`; entries with different batch ids never
//! interact, which lets several scenes (or RoIs) share one pass.

use rustc_hash::FxHashMap;

pub type Key = [i32; 4];

/// Sorted unique coordinates with a reverse index.
#[derive(Debug, Clone)]
pub struct Layout {
    pub keys: Vec<Key>,
    index: FxHashMap<Key, u32>,
}

impl Layout {
    /// `keys` must already be sorted and unique.
    pub fn from_sorted(keys: Vec<Key>) -> Layout {
        debug_assert!(keys.windows(2).all(|w| w[0] < w[1]));
        let index = keys.iter().enumerate().map(|(i, &k)| (k, i as u32)).collect();
        Layout { keys, index }
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn get(&self, key: &Key) -> Option<u32> {
        self.index.get(key).copied()
    }

    /// Row range belonging to batch entry `b`.
    pub fn batch_range(&self, b: i32) -> std::ops::Range<usize> {
        let lo = self.keys.partition_point(|k| k[0] < b);
        let hi = self.keys.partition_point(|k| k[0] <= b);
        lo..hi
    }

    /// Coordinates downsampled by 2 (floor division), deduplicated.
    pub fn downsample(&self) -> (Layout, KernelMap) {
        let parent = |k: &Key| [k[0], k[1].div_euclid(2), k[2].div_euclid(2), k[3].div_euclid(2)];
        let mut keys: Vec<Key> = self.keys.iter().map(parent).collect();
        keys.sort_unstable();
        keys.dedup();
        let coarse = Layout::from_sorted(keys);
        let mut offsets = vec![Vec::new(); 8];
        for (i, k) in self.keys.iter().enumerate() {
            let o = (k[1].rem_euclid(2) * 4 + k[2].rem_euclid(2) * 2 + k[3].rem_euclid(2)) as usize;
            let p = coarse.get(&parent(k)).expect("parent exists");
            offsets[o].push((i as u32, p));
        }
        let map = KernelMap {
            n_in: self.len(),
            n_out: coarse.len(),
            offsets,
        };
        (coarse, map)
    }

    /// 3×3×3 neighborhood map with output layout equal to the input layout.
    pub fn submanifold3(&self) -> KernelMap {
        let mut offsets = Vec::with_capacity(27);
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    let mut pairs = Vec::new();
                    for (o, k) in self.keys.iter().enumerate() {
                        let n = [k[0], k[1] + dx, k[2] + dy, k[3] + dz];
                        if let Some(i) = self.get(&n) {
                            pairs.push((i, o as u32));
                        }
                    }
                    offsets.push(pairs);
                }
            }
        }
        KernelMap {
            n_in: self.len(),
            n_out: self.len(),
            offsets,
        }
    }
}

/// For every kernel offset, the `(input row, output row)` pairs it connects.
#[derive(Debug, Clone)]
pub struct KernelMap {
    pub n_in: usize,
    pub n_out: usize,
    pub offsets: Vec<Vec<(u32, u32)>>,
}

impl KernelMap {
    pub fn volume(&self) -> usize {
        self.offsets.len()
    }

    /// Map of the transposed convolution (output rows become inputs).
    pub fn transpose(&self) -> KernelMap {
        KernelMap {
            n_in: self.n_out,
            n_out: self.n_in,
            offsets: self
                .offsets
                .iter()
                .map(|pairs| pairs.iter().map(|&(i, o)| (o, i)).collect())
                .collect(),
        }
    }

    pub fn pair_count(&self) -> usize {
        self.offsets.iter().map(Vec::len).sum()
    }
}

/// Sparse level pyramid: layouts at strides 1, 2, 4, … with the maps
/// between consecutive levels and a submanifold map per level.
#[derive(Debug, Clone)]
pub struct Pyramid {
    pub layouts: Vec<Layout>,
    pub subm: Vec<KernelMap>,
    /// `down[l]` maps level `l` to level `l + 1`.
    pub down: Vec<KernelMap>,
}

impl Pyramid {
    pub fn build(base: Layout, levels: usize) -> Pyramid {
        let mut layouts = vec![base];
        let mut down = Vec::new();
        for _ in 1..levels {
            let (coarse, map) = layouts.last().unwrap().downsample();
            layouts.push(coarse);
            down.push(map);
        }
        let subm = layouts.iter().map(Layout::submanifold3).collect();
        Pyramid { layouts, subm, down }
    }
}
