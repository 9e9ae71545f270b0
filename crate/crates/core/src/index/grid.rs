use crate::corpus::ChunkConfig;

/// Finer spacing at small sizes, wider gaps at large ones.
pub const DEFAULT_CHUNK_SIZES: [usize; 9] = [100, 150, 200, 300, 400, 500, 800, 1200, 2000];
pub const DEFAULT_CHUNK_OVERLAPS: [usize; 5] = [0, 50, 100, 200, 400];

/// Every valid `(size, overlap)` pair of the given axes, invalid pairs
/// (`overlap >= size`) skipped, in `(size, overlap)` order.
pub fn default_grid() -> Vec<ChunkConfig> {
    grid_of(&DEFAULT_CHUNK_SIZES, &DEFAULT_CHUNK_OVERLAPS)
}

pub fn grid_of(sizes: &[usize], overlaps: &[usize]) -> Vec<ChunkConfig> {
    let mut out: Vec<ChunkConfig> = sizes
        .iter()
        .flat_map(|&s| overlaps.iter().filter_map(move |&o| ChunkConfig::new(s, o).ok()))
        .collect();
    out.sort();
    out.dedup();
    out
}
