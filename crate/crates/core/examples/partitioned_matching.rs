//! Set-by-set mutual nearest neighbours versus matching everything at once.

use mdnet::matcher::{match_partitioned, match_unpartitioned, split_even, synthetic_descriptors};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let (m, dim) = (1024, 128);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let a = synthetic_descriptors(m, dim, &mut rng);
    // Image 2 sees the same descriptors with a little noise.
    let b: Vec<f32> = a.iter().zip(synthetic_descriptors(m, dim, &mut rng)).map(|(x, n)| x + 0.02 * n).collect();

    for n in [1, 2, 4, 8] {
        let (f1, f2) = (split_even(0, 0, &a, dim, n), split_even(0, 0, &b, dim, n));
        let r = match_partitioned(&f1, &f2)?;
        let correct = r.matches.iter().filter(|x| x.idx1 == x.idx2).count();
        println!(
            "N={n}: {} distances ({}^2/{n}), {} matches, {} correct, {:.2} ms",
            r.distance_computations,
            m,
            r.len(),
            correct,
            r.wallclock.as_secs_f64() * 1e3
        );
    }
    let (f1, f2) = (split_even(0, 0, &a, dim, 4), split_even(0, 0, &b, dim, 4));
    let (full, count) = match_unpartitioned(&f1, &f2)?;
    let crossing = full.iter().filter(|(x, set2)| x.set != *set2).count();
    println!("unpartitioned: {count} distances, {} matches, {crossing} across sets", full.len());
    Ok(())
}
