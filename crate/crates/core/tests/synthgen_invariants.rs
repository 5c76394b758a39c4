//! Generator invariants checked from the rendered voxels, not the parameters.

use std::collections::VecDeque;
use std::fs;
use std::path::Path;

use wavecast::synthgen::{
    self, build_dataset, gen_sequence, DatasetKind, DatasetSpec, DynamicsParams, Manifest, Split,
};
use wavecast::{vf1, RealField};

/// Foreground at ≥ 0.5 with enclosed background filled in: background not
/// face-connected to the border belongs to the shape.
fn filled_count(f: &RealField) -> usize {
    let grid = f.grid();
    let dims = grid.dims().to_vec();
    let fg: Vec<bool> = f.data().iter().map(|&v| v >= 0.5).collect();
    let mut outside = vec![false; fg.len()];
    let mut queue = VecDeque::new();
    for i in 0..fg.len() {
        let idx = grid.unravel(i);
        let on_border = idx.iter().zip(&dims).any(|(&x, &n)| x == 0 || x + 1 == n);
        if on_border && !fg[i] {
            outside[i] = true;
            queue.push_back(i);
        }
    }
    while let Some(i) = queue.pop_front() {
        let idx = grid.unravel(i);
        for axis in 0..dims.len() {
            for step in [-1isize, 1] {
                let x = idx[axis] as isize + step;
                if x < 0 || x >= dims[axis] as isize {
                    continue;
                }
                let mut nb = idx.clone();
                nb[axis] = x as usize;
                let j = grid.ravel(&nb);
                if !fg[j] && !outside[j] {
                    outside[j] = true;
                    queue.push_back(j);
                }
            }
        }
    }
    outside.iter().filter(|&&o| !o).count()
}

fn equivalent_radius(f: &RealField) -> f64 {
    let n = filled_count(f) as f64;
    match f.grid().rank() {
        2 => (n / std::f64::consts::PI).sqrt(),
        _ => (3.0 * n / (4.0 * std::f64::consts::PI)).cbrt(),
    }
}

fn assert_growth(frames: &[RealField], growth: f64, what: &str) {
    let radii: Vec<f64> = frames.iter().map(equivalent_radius).collect();
    for w in radii.windows(2) {
        let d = w[1] - w[0];
        assert!((d - growth).abs() <= 0.5, "{what}: radii {radii:?}, growth {growth}");
    }
}

#[test]
fn regular_shapes_grow_at_the_drawn_rate() {
    for (dims, growth) in [(vec![64, 64, 64], 1.0), (vec![48, 48, 48], 0.6), (vec![128, 128], 1.3)] {
        let p = DynamicsParams {
            r0: if dims.len() == 2 { 14.0 } else { 8.0 },
            growth_rate: growth,
            rotation_speed: 0.3,
            irregularity: 0.0,
            center_shift: vec![0.5; dims.len()],
            smooth_sigma: 1.0,
        };
        let frames = match dims.len() {
            2 => synthgen::render_sequence_2d(&dims, &p).unwrap(),
            _ => synthgen::render_sequence_3d(&dims, &p).unwrap(),
        };
        assert_growth(&frames, growth, &format!("{dims:?}"));
    }
}

/// Drawn dynamics with the shape perturbation switched off.
#[test]
fn drawn_regular_samples_grow_at_their_rate() {
    for idx in 0..4 {
        for (kind, dims) in [(DatasetKind::ThreeD, vec![64, 64, 64]), (DatasetKind::TwoD, vec![128, 128])] {
            let (mut p, _) = synthgen::draw_params(kind, &dims, 17, idx).unwrap();
            p.irregularity = 0.0;
            let frames = match kind {
                DatasetKind::TwoD => synthgen::render_sequence_2d(&dims, &p).unwrap(),
                DatasetKind::ThreeD => synthgen::render_sequence_3d(&dims, &p).unwrap(),
            };
            assert_growth(&frames, p.growth_rate, &format!("{kind:?} sample {idx}"));
        }
    }
}

#[test]
fn foreground_stays_clear_of_the_faces() {
    for idx in 0..6 {
        let s = gen_sequence(DatasetKind::ThreeD, 3, idx, &[32, 32, 32]).unwrap();
        for f in &s.frames {
            let grid = f.grid();
            for (i, &v) in f.data().iter().enumerate() {
                assert!((0.0..=1.0).contains(&v));
                if v >= 0.5 {
                    let x = grid.unravel(i);
                    assert!(x.iter().all(|&c| c >= 1 && c <= 30), "sample {idx} touches a face at {x:?}");
                }
            }
        }
    }
}

#[test]
fn smoothing_never_overshoots() {
    let s = gen_sequence(DatasetKind::ThreeD, 5, 0, &[32, 32, 32]).unwrap();
    let raw_max = 1.0;
    for f in &s.frames {
        let sm = synthgen::gaussian_smooth(f, 1.0).unwrap();
        assert!(sm.max() <= f.max() + 1e-12 && sm.max() <= raw_max);
        assert!(sm.min() >= f.min() - 1e-12);
        let mass: f64 = f.data().iter().sum();
        let mass_sm: f64 = sm.data().iter().sum();
        assert!((mass - mass_sm).abs() < 1e-9 * mass.max(1.0));
    }
}

fn tree_bytes(dir: &Path, m: &Manifest) -> Vec<(String, Vec<u8>)> {
    synthgen::dataset_files(m)
        .into_iter()
        .map(|rel| {
            let bytes = fs::read(dir.join(&rel)).unwrap();
            (rel.display().to_string(), bytes)
        })
        .collect()
}

fn spec(kind: DatasetKind, dims: &[usize]) -> DatasetSpec {
    DatasetSpec {
        kind,
        dims: dims.to_vec(),
        n_train: 5,
        n_test: 3,
        master_seed: 99,
    }
}

#[test]
fn regeneration_is_byte_identical_across_thread_counts() {
    for s in [spec(DatasetKind::TwoD, &[24, 24]), spec(DatasetKind::ThreeD, &[16, 16, 16])] {
        let mut trees = Vec::new();
        for threads in [1, 3] {
            let dir = tempfile::tempdir().unwrap();
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            let m = pool.install(|| build_dataset(&s, dir.path())).unwrap();
            trees.push(tree_bytes(dir.path(), &m));
        }
        assert_eq!(trees[0], trees[1]);
        assert_eq!(trees[0].len(), 1 + 2 * 6 * 8);
    }
}

#[test]
fn samples_do_not_depend_on_generation_order() {
    let s = spec(DatasetKind::TwoD, &[24, 24]);
    let dir = tempfile::tempdir().unwrap();
    let m = build_dataset(&s, dir.path()).unwrap();
    // Regenerate singly, back to front, and compare against the written files.
    for split in [Split::Test, Split::Train] {
        for e in m.entries(split).iter().rev() {
            let sample = gen_sequence(s.kind, s.master_seed, e.index, &s.dims).unwrap();
            assert_eq!(sample.params, e.params);
            for (t, f) in sample.frames.iter().enumerate() {
                let on_disk = fs::read(dir.path().join(&e.files[t])).unwrap();
                assert_eq!(vf1::encode_real(f), on_disk);
            }
        }
    }
    let train: Vec<u64> = m.train.iter().map(|e| e.index).collect();
    let test: Vec<u64> = m.test.iter().map(|e| e.index).collect();
    assert!(train.iter().all(|i| !test.contains(i)));
}

#[test]
fn loaded_split_matches_generation() {
    let s = spec(DatasetKind::ThreeD, &[16, 16, 16]);
    let dir = tempfile::tempdir().unwrap();
    build_dataset(&s, dir.path()).unwrap();
    let test = synthgen::load_split(dir.path(), Split::Test).unwrap();
    assert_eq!(test.len(), 3);
    for sample in &test {
        let fresh = gen_sequence(s.kind, s.master_seed, sample.sample_index, &s.dims).unwrap();
        for (a, b) in sample.frames.iter().zip(&fresh.frames) {
            // Stored as f32.
            let err = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            assert!(err <= 6e-8, "{err:e}");
        }
    }
}

#[test]
fn regular_foreground_count_strictly_increases() {
    for idx in 0..3 {
        let (mut p, _) = synthgen::draw_params(DatasetKind::ThreeD, &[48, 48, 48], 8, idx).unwrap();
        p.irregularity = 0.0;
        let counts: Vec<usize> = synthgen::render_sequence_3d(&[48, 48, 48], &p)
            .unwrap()
            .iter()
            .map(|f| f.data().iter().filter(|&&v| v >= 0.5).count())
            .collect();
        assert!(counts.windows(2).all(|w| w[1] > w[0]), "{counts:?}");
    }
}
