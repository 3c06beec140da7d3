//! Word-packed bit-vectors and the per-partition constraint index built from them.

use crate::model::{check_constraint_count, ConstraintSet, ModelError};

const WORD_BITS: usize = 64;

fn words_for(len: usize) -> usize {
    len.div_ceil(WORD_BITS)
}

/// Growable bit-vector. Bits past `len` are always zero.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Bitmap {
    words: Vec<u64>,
    len: usize,
}

impl Bitmap {
    pub fn new(len: usize, fill: bool) -> Self {
        let mut words = vec![if fill { u64::MAX } else { 0 }; words_for(len)];
        if fill {
            if let Some(last) = words.last_mut() {
                let tail = len % WORD_BITS;
                if tail != 0 {
                    *last = (1u64 << tail) - 1;
                }
            }
        }
        Self { words, len }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    pub fn get(&self, idx: usize) -> bool {
        assert!(idx < self.len, "bit {idx} out of range {}", self.len);
        self.words[idx / WORD_BITS] >> (idx % WORD_BITS) & 1 == 1
    }

    pub fn set(&mut self, idx: usize, value: bool) {
        assert!(idx < self.len, "bit {idx} out of range {}", self.len);
        let w = &mut self.words[idx / WORD_BITS];
        let mask = 1u64 << (idx % WORD_BITS);
        if value {
            *w |= mask;
        } else {
            *w &= !mask;
        }
    }

    pub fn push(&mut self, value: bool) {
        if self.len.is_multiple_of(WORD_BITS) {
            self.words.push(0);
        }
        self.len += 1;
        self.set(self.len - 1, value);
    }

    /// Removes bit `idx`, shifting every higher bit down by one position.
    pub fn remove(&mut self, idx: usize) {
        assert!(idx < self.len, "bit {idx} out of range {}", self.len);
        let w = idx / WORD_BITS;
        let b = idx % WORD_BITS;
        let low = self.words[w] & ((1u64 << b) - 1);
        let high = if b == WORD_BITS - 1 { 0 } else { (self.words[w] >> (b + 1)) << b };
        self.words[w] = low | high;
        for i in w..self.words.len() {
            if i > w {
                self.words[i] >>= 1;
            }
            if let Some(&next) = self.words.get(i + 1) {
                self.words[i] |= (next & 1) << (WORD_BITS - 1);
            }
        }
        self.len -= 1;
        self.words.truncate(words_for(self.len));
    }

    /// In-place AND. Returns the number of word operations performed.
    pub fn and_assign(&mut self, other: &Bitmap) -> usize {
        assert_eq!(self.len, other.len, "bitmap length mismatch");
        for (a, b) in self.words.iter_mut().zip(&other.words) {
            *a &= *b;
        }
        self.words.len()
    }

    pub fn count_ones(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    /// Positions of set bits in ascending order.
    pub fn iter_ones(&self) -> impl Iterator<Item = usize> + '_ {
        self.words.iter().enumerate().flat_map(|(wi, &word)| {
            let mut rest = word;
            std::iter::from_fn(move || {
                if rest == 0 {
                    return None;
                }
                let bit = rest.trailing_zeros() as usize;
                rest &= rest - 1;
                Some(wi * WORD_BITS + bit)
            })
        })
    }
}

/// One bit-vector per constraint id; bit `j` of vector `c` is set iff the
/// node at ordinal `j` of the partition satisfies constraint `c`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConstraintBitmap {
    vectors: Vec<Bitmap>,
    len: usize,
}

impl ConstraintBitmap {
    pub fn new(constraint_count: usize) -> Result<Self, ModelError> {
        check_constraint_count(constraint_count)?;
        Ok(Self { vectors: vec![Bitmap::default(); constraint_count], len: 0 })
    }

    pub fn constraint_count(&self) -> usize {
        self.vectors.len()
    }

    /// Number of node ordinals tracked.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn vector(&self, constraint: usize) -> &Bitmap {
        &self.vectors[constraint]
    }

    /// Appends a node ordinal carrying `machine` constraints. Ids at or past
    /// the configured count are ignored.
    pub fn push_node(&mut self, machine: ConstraintSet) {
        for (c, v) in self.vectors.iter_mut().enumerate() {
            v.push(machine.contains(c));
        }
        self.len += 1;
    }

    pub fn remove_node(&mut self, ordinal: usize) {
        for v in &mut self.vectors {
            v.remove(ordinal);
        }
        self.len -= 1;
    }

    /// AND-reduces the vectors named by `task`, starting from all ones.
    /// Returns the candidate vector and the word operations spent.
    pub fn candidates(&self, task: ConstraintSet) -> Result<(Bitmap, usize), ModelError> {
        if task.span() > self.vectors.len() {
            return Err(ModelError::ConstraintOutOfRange {
                id: task.span() - 1,
                m: self.vectors.len(),
            });
        }
        let mut acc = Bitmap::new(self.len, true);
        let mut ops = acc.words().len();
        for c in task.iter() {
            ops += acc.and_assign(&self.vectors[c]);
        }
        Ok((acc, ops))
    }
}
