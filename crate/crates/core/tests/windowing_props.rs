use dwinkit_core::windowing::{partition, partition_var, reverse, reverse_var, split_channel_groups, Direction, WindowPlan, WindowSpec};
use dwinkit_core::{Tape, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;

fn volume(shape: [usize; 4], seed: u64) -> Tensor<f32> {
    Tensor::randn(shape.to_vec(), 1.0, &mut rand_pcg::Pcg64::seed_from_u64(seed))
}

fn direction() -> impl Strategy<Value = Direction> {
    prop_oneof![Just(Direction::Horizontal), Just(Direction::Vertical), Just(Direction::Depthwise)]
}

fn case() -> impl Strategy<Value = ([usize; 4], Direction, WindowSpec, u64)> {
    (1usize..=9, 1usize..=9, 1usize..=9, 1usize..=3, direction(), 1usize..=4, 1usize..=4, 1usize..=4, any::<u64>())
        .prop_map(|(h, w, d, c, dir, a, b, e, seed)| ([h, w, d, c], dir, WindowSpec::new(a, b, e).unwrap(), seed))
}

fn padded_voxels(shape: [usize; 4], dir: Direction, spec: WindowSpec) -> usize {
    let ext = [spec.wh, spec.ww, spec.wd];
    let mut n = 1;
    for axis in 0..3 {
        n *= if axis == full_axis(dir) {
            shape[axis]
        } else {
            let w = ext[axis].min(shape[axis]);
            shape[axis].div_ceil(w) * w
        };
    }
    n
}

fn full_axis(dir: Direction) -> usize {
    match dir {
        Direction::Horizontal => 0,
        Direction::Vertical => 1,
        Direction::Depthwise => 2,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1200))]

    #[test]
    fn partition_reverse_is_exact_and_conserves_voxels((shape, dir, spec, seed) in case()) {
        let x = volume(shape, seed);
        let set = partition(&x, dir, spec).unwrap();
        let [nw, tpw, c] = [set.windows.shape()[0], set.windows.shape()[1], set.windows.shape()[2]];
        prop_assert_eq!(c, shape[3]);
        prop_assert_eq!(nw * tpw, padded_voxels(shape, dir, spec));

        let back = reverse(&set).unwrap();
        prop_assert_eq!(back.shape(), x.shape());
        prop_assert!(back.data().iter().zip(x.data()).all(|(a, b)| a.to_bits() == b.to_bits()));

        // Every voxel appears exactly once; every other row is padding.
        let plan = WindowPlan::new([shape[0], shape[1], shape[2]], dir, spec).unwrap();
        let mut seen = vec![0u32; shape[0] * shape[1] * shape[2]];
        let mut pads = 0;
        for &i in &plan.gather_index() {
            if i == u32::MAX { pads += 1 } else { seen[i as usize] += 1 }
        }
        prop_assert!(seen.iter().all(|&n| n == 1));
        prop_assert_eq!(pads + seen.len(), nw * tpw);
        let nonzero_rows = set.windows.data().chunks(c).filter(|r| r.iter().any(|&v| v != 0.0)).count();
        prop_assert!(nonzero_rows <= seen.len());
    }

    #[test]
    fn partition_is_linear((shape, dir, spec, seed) in case()) {
        let a = volume(shape, seed);
        let b = volume(shape, seed ^ 0xabcdef);
        let sum = Tensor::new(a.shape().to_vec(), a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect()).unwrap();
        let (pa, pb, ps) = (partition(&a, dir, spec).unwrap(), partition(&b, dir, spec).unwrap(), partition(&sum, dir, spec).unwrap());
        for ((x, y), s) in pa.windows.data().iter().zip(pb.windows.data()).zip(ps.windows.data()) {
            prop_assert_eq!((x + y).to_bits(), s.to_bits());
        }
    }

    #[test]
    fn differentiable_partition_matches_plain((shape, dir, spec, seed) in case()) {
        let x = volume(shape, seed);
        let set = partition(&x, dir, spec).unwrap();
        let plan = WindowPlan::new([shape[0], shape[1], shape[2]], dir, spec).unwrap();
        let mut tape = Tape::<f32>::new();
        let xv = tape.constant(x.clone());
        let w = partition_var(&mut tape, xv, &plan).unwrap();
        prop_assert_eq!(tape.value(w), &set.windows);
        let back = reverse_var(&mut tape, w, &plan).unwrap();
        prop_assert_eq!(tape.value(back), &x);
    }

    #[test]
    fn shape_ops_roundtrip_bit_exactly(h in 1usize..5, w in 1usize..5, c3 in 1usize..4, seed in any::<u64>()) {
        let c = 3 * c3;
        let x = volume([h, w, 2, c], seed);
        let mut tape = Tape::<f32>::new();
        let xv = tape.constant(x.clone());
        let r = tape.reshape(xv, &[h * w, 2 * c]).unwrap();
        let r = tape.reshape(r, &[h, w, 2, c]).unwrap();
        prop_assert_eq!(tape.value(r), &x);
        let p = tape.permute(xv, &[2, 0, 3, 1]).unwrap();
        let p = tape.permute(p, &[1, 3, 0, 2]).unwrap();
        prop_assert_eq!(tape.value(p), &x);
        let parts = tape.split_lastdim(xv, &[c3, 2 * c3]).unwrap();
        let cat = tape.concat_lastdim(&parts).unwrap();
        prop_assert_eq!(tape.value(cat), &x);
        let groups = split_channel_groups(&x, 3).unwrap();
        let gv: Vec<_> = groups.into_iter().map(|g| tape.constant(g)).collect();
        let cat = tape.concat_lastdim(&gv).unwrap();
        prop_assert_eq!(tape.value(cat), &x);
    }
}

#[test]
fn spec_partition_counts() {
    let x = volume([4, 4, 4, 3], 1);
    let s = partition(&x, Direction::Horizontal, WindowSpec::new(1, 2, 2).unwrap()).unwrap();
    assert_eq!(s.windows.shape(), &[4, 16, 3]);
    let s = partition(&x, Direction::Depthwise, WindowSpec::new(4, 4, 1).unwrap()).unwrap();
    assert_eq!(s.windows.shape(), &[1, 64, 3]);
    let x = volume([5, 4, 4, 1], 2);
    let s = partition(&x, Direction::Horizontal, WindowSpec::new(1, 2, 2).unwrap()).unwrap();
    assert_eq!(s.windows.shape(), &[4, 20, 1]);
    assert_eq!(s.pad_amounts, [0, 0, 0]);
}
