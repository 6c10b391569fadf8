use proptest::prelude::*;

use ftrep_core::procimage::{
    chunks_disjoint, image_equivalent, pointers_local, replicate, JmpContext, ProcessImage,
};

const SRC: std::ops::Range<u64> = 0x1000..0x100_0000;
const TGT: std::ops::Range<u64> = 0x200_0000..0x300_0000;

fn build(space: std::ops::Range<u64>, data: Vec<u8>, chunks: Vec<Vec<u8>>, stack: Vec<u8>, pc: u64) -> ProcessImage {
    let mut img = ProcessImage::new(space);
    img.data = data;
    for (i, c) in chunks.into_iter().enumerate() {
        img.malloc(0x10 + 8 * i as u64, c).unwrap();
    }
    img.stack = stack;
    img.capture(JmpContext { pc, sp: 0x7fff, fp: 0x7ff0 });
    img
}

fn image(space: std::ops::Range<u64>) -> impl Strategy<Value = ProcessImage> {
    (
        prop::collection::vec(any::<u8>(), 0..128),
        prop::collection::vec(prop::collection::vec(any::<u8>(), 0..64), 0..12),
        prop::collection::vec(any::<u8>(), 0..256),
        any::<u64>(),
    )
        .prop_map(move |(d, c, s, pc)| build(space.clone(), d, c, s, pc))
}

proptest! {
    #[test]
    fn replica_matches_source(src in image(SRC), tgt in image(TGT), keep in 0usize..16) {
        let mut tgt = tgt;
        let n = src.data.len().min(tgt.data.len());
        if keep > 0 && n > 0 {
            let start = keep % n;
            tgt.preserved = vec![start..(start + 4).min(n)];
        }
        let before = tgt.clone();
        let out = replicate(&src, tgt).unwrap();
        let eq = image_equivalent(&src, &out);
        prop_assert!(eq.verdict, "{:?}", eq.mismatches);
        for r in &before.preserved {
            prop_assert_eq!(&out.data[r.clone()], &before.data[r.clone()]);
        }
        prop_assert!(pointers_local(&out));
        prop_assert!(chunks_disjoint(&out));
        prop_assert_eq!(out.heap.len(), src.heap.len());
    }
}
