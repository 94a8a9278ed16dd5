use std::time::Instant;

use descriptor_engine::retrieval::{build_index, search_with, SearchOptions};
use descriptor_engine::synthetic::gaussian_set;

fn main() {
    let args: Vec<usize> = std::env::args().skip(1).map(|a| a.parse().unwrap()).collect();
    let (nq, nb, d) = (
        args.first().copied().unwrap_or(5000),
        args.get(1).copied().unwrap_or(200_000),
        64,
    );
    let base = gaussian_set(nb, d, 1, "z").unwrap();
    let queries = gaussian_set(nq, d, 2, "q").unwrap();
    let index = build_index(base).unwrap();
    let t = Instant::now();
    let res = search_with(&index, &queries, 5, &SearchOptions::default()).unwrap();
    let secs = t.elapsed().as_secs_f64();
    println!(
        "{nq} x {nb} x {d}: {secs:.2}s, {:.0} queries/s, first {:?}",
        nq as f64 / secs,
        res[0].hits[0]
    );
}
