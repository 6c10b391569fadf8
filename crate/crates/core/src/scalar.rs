//! Element types usable in reductions.
//!
//! Collectives move bytes; reductions decode them through [`Element`], which
//! is implemented for the 32- and 64-bit integers and floats. Integer sums wrap
//! so that reductions are total and order-independent.

use num_traits::{Bounded, Num};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ReduceOp {
    Sum,
    Min,
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Dtype {
    I32,
    I64,
    F32,
    F64,
}

impl Dtype {
    pub fn width(self) -> usize {
        match self {
            Dtype::I32 | Dtype::F32 => 4,
            Dtype::I64 | Dtype::F64 => 8,
        }
    }
}

pub trait Element: Copy + PartialOrd + Num + Bounded + Send + Sync + std::fmt::Debug + 'static {
    const DTYPE: Dtype;

    fn sum(self, other: Self) -> Self;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    fn combine(self, other: Self, op: ReduceOp) -> Self {
        match op {
            ReduceOp::Sum => self.sum(other),
            ReduceOp::Min => {
                if other < self {
                    other
                } else {
                    self
                }
            }
            ReduceOp::Max => {
                if other > self {
                    other
                } else {
                    self
                }
            }
        }
    }
}

macro_rules! int_element {
    ($t:ty, $d:expr) => {
        impl Element for $t {
            const DTYPE: Dtype = $d;
            fn sum(self, other: Self) -> Self {
                self.wrapping_add(other)
            }
            fn write_le(self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_le_bytes());
            }
            fn read_le(bytes: &[u8]) -> Self {
                <$t>::from_le_bytes(bytes.try_into().expect("element width"))
            }
        }
    };
}

macro_rules! float_element {
    ($t:ty, $d:expr) => {
        impl Element for $t {
            const DTYPE: Dtype = $d;
            fn sum(self, other: Self) -> Self {
                self + other
            }
            fn write_le(self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_le_bytes());
            }
            fn read_le(bytes: &[u8]) -> Self {
                <$t>::from_le_bytes(bytes.try_into().expect("element width"))
            }
        }
    };
}

int_element!(i32, Dtype::I32);
int_element!(i64, Dtype::I64);
float_element!(f32, Dtype::F32);
float_element!(f64, Dtype::F64);

pub fn encode<T: Element>(values: &[T]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * T::DTYPE.width());
    for v in values {
        v.write_le(&mut out);
    }
    out
}

pub fn decode<T: Element>(bytes: &[u8]) -> Vec<T> {
    bytes.chunks_exact(T::DTYPE.width()).map(T::read_le).collect()
}

fn combine_typed<T: Element>(acc: &mut [u8], other: &[u8], op: ReduceOp) {
    let w = T::DTYPE.width();
    for (a, b) in acc.chunks_exact_mut(w).zip(other.chunks_exact(w)) {
        let v = T::read_le(a).combine(T::read_le(b), op);
        let mut tmp = Vec::with_capacity(w);
        v.write_le(&mut tmp);
        a.copy_from_slice(&tmp);
    }
}

/// Element-wise `acc = acc (op) other` over encoded buffers of equal length.
pub fn combine_bytes(dtype: Dtype, op: ReduceOp, acc: &mut [u8], other: &[u8]) {
    assert_eq!(acc.len(), other.len(), "reduction operands differ in length");
    match dtype {
        Dtype::I32 => combine_typed::<i32>(acc, other, op),
        Dtype::I64 => combine_typed::<i64>(acc, other, op),
        Dtype::F32 => combine_typed::<f32>(acc, other, op),
        Dtype::F64 => combine_typed::<f64>(acc, other, op),
    }
}

/// Reference fold used by tests: left-to-right reduction of equal-length rows.
pub fn fold<T: Element>(rows: &[Vec<T>], op: ReduceOp) -> Vec<T> {
    let mut it = rows.iter();
    let mut acc = it.next().cloned().unwrap_or_default();
    for row in it {
        for (a, b) in acc.iter_mut().zip(row) {
            *a = a.combine(*b, op);
        }
    }
    acc
}
