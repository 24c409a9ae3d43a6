//! Flat parameter storage.
//!
//! Every model keeps all trainable values in one `Vec<f64>`; named blocks
//! give row-major matrix views into it. The optimizer, gradient checks and
//! checkpoints all work on the flat vector.

use ndarray::{ArrayView2, ArrayViewMut2};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Block {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }

    pub fn slice<'a>(&self, data: &'a [f64]) -> &'a [f64] {
        &data[self.range()]
    }

    pub fn slice_mut<'a>(&self, data: &'a mut [f64]) -> &'a mut [f64] {
        &mut data[self.range()]
    }

    pub fn view<'a>(&self, data: &'a [f64]) -> ArrayView2<'a, f64> {
        ArrayView2::from_shape((self.rows, self.cols), self.slice(data)).expect("block shape")
    }

    pub fn view_mut<'a>(&self, data: &'a mut [f64]) -> ArrayViewMut2<'a, f64> {
        ArrayViewMut2::from_shape((self.rows, self.cols), self.slice_mut(data)).expect("block shape")
    }

    pub fn row<'a>(&self, data: &'a [f64], r: usize) -> &'a [f64] {
        let start = self.offset + r * self.cols;
        &data[start..start + self.cols]
    }
}

/// Allocates consecutive blocks.
#[derive(Debug, Default)]
pub struct LayoutBuilder {
    next: usize,
}

impl LayoutBuilder {
    pub fn block(&mut self, rows: usize, cols: usize) -> Block {
        let b = Block {
            offset: self.next,
            rows,
            cols,
        };
        self.next += rows * cols;
        b
    }

    pub fn total(&self) -> usize {
        self.next
    }
}
