//! Population functions must be deterministic, independent of the target's
//! prior contents, and composable over adjacent ranges.

use std::io::Write;

use proptest::prelude::*;
use ufo_core::{FileSpec, FillPopulate, Populate, PopulateRequest, SeqPopulate, SeqSpec};

fn run(p: &dyn Populate, e: usize, lo: usize, hi: usize, fill: u8) -> Vec<u8> {
    let mut buf = vec![fill; (hi - lo) * e];
    p.populate(&mut PopulateRequest::new(lo, hi, e, &mut buf)).unwrap();
    buf
}

/// Split points `a <= b <= c` inside `0..=n`.
fn split_points(n: usize) -> impl Strategy<Value = (usize, usize, usize)> {
    (0..=n, 0..=n, 0..=n).prop_map(|(x, y, z)| {
        let mut v = [x, y, z];
        v.sort_unstable();
        (v[0], v[1], v[2])
    })
}

fn check_splits(p: &dyn Populate, e: usize, (a, b, c): (usize, usize, usize)) -> Result<(), TestCaseError> {
    let whole = run(p, e, a, c, 0);
    prop_assert_eq!(&whole, &run(p, e, a, c, 0xFF));
    let mut joined = run(p, e, a, b, 0);
    joined.extend(run(p, e, b, c, 0x33));
    prop_assert_eq!(whole, joined);
    Ok(())
}

proptest! {
    #[test]
    fn seq_contract(
        from in -1_000_000i64..1_000_000,
        by in prop_oneof![-50i64..-1, 1i64..50],
        e in prop_oneof![Just(1usize), Just(2), Just(3), Just(4), Just(8)],
        pts in split_points(5000),
    ) {
        let p = SeqPopulate { spec: SeqSpec::new(from, from + by * 4999, by) };
        check_splits(&p, e, pts)?;
        let (a, _, c) = pts;
        let out = run(&p, e, a, c, 0);
        for (k, got) in out.chunks_exact(e).enumerate() {
            let v = from + by * (a + k) as i64;
            prop_assert_eq!(got, &v.to_le_bytes()[..e]);
        }
    }

    #[test]
    fn fill_contract(value in proptest::collection::vec(any::<u8>(), 1..24), pts in split_points(3000)) {
        let e = value.len();
        let p = FillPopulate { value: value.clone() };
        check_splits(&p, e, pts)?;
        let (a, _, c) = pts;
        prop_assert_eq!(run(&p, e, a, c, 7), value.repeat(c - a));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn file_contract(
        data in proptest::collection::vec(any::<u8>(), 0..20_000),
        e in 1usize..12,
        base in 0u64..64,
        seed in any::<u64>(),
    ) {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(&vec![0xEE; base as usize]).unwrap();
        f.write_all(&data).unwrap();
        f.flush().unwrap();
        let n = data.len() / e;
        let p = FileSpec { path: f.path().into(), base_offset: base, element_size: e, element_count: n }
            .open()
            .unwrap();
        let a = (seed as usize) % (n + 1);
        let c = a + ((seed >> 32) as usize) % (n - a + 1);
        let b = a + (c - a) / 3;
        check_splits(&p, e, (a, b, c))?;
        prop_assert_eq!(run(&p, e, a, c, 0), data[a * e..c * e].to_vec());
    }
}
