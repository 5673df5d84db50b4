use std::rc::Rc;

use super::ops::{
    add_col_bias_value, concat_cols_value, concat_rows_value, cross_entropy_value, gelu, layernorm_forward,
    select_cols_value, Ops,
};
use crate::error::Result;
use crate::numerics::{l1_entrywise, matmul, softmax_rows, Matrix};

/// Value-only evaluation of [`Ops`]; nothing is recorded.
#[derive(Default)]
pub struct Eager;

impl Eager {
    pub fn new() -> Self {
        Eager
    }
}

type V = Rc<Matrix>;

impl Ops for Eager {
    type Var = V;

    fn constant(&mut self, m: Matrix) -> V {
        Rc::new(m)
    }

    fn param(&mut self, _name: &str, m: &Matrix) -> V {
        Rc::new(m.clone())
    }

    fn value<'a>(&'a self, v: &'a V) -> &'a Matrix {
        v
    }

    fn matmul(&mut self, a: &V, b: &V) -> Result<V> {
        Ok(Rc::new(matmul(a, b)?))
    }

    fn transpose(&mut self, a: &V) -> V {
        Rc::new(a.transpose())
    }

    fn add(&mut self, a: &V, b: &V) -> Result<V> {
        Ok(Rc::new(a.add(b)?))
    }

    fn add_col_bias(&mut self, x: &V, bias: &V) -> Result<V> {
        Ok(Rc::new(add_col_bias_value(x, bias)?))
    }

    fn scale(&mut self, x: &V, c: f64) -> V {
        Rc::new(x.scale(c))
    }

    fn row_slice(&mut self, x: &V, start: usize, len: usize) -> V {
        Rc::new(x.row_slice(start, len))
    }

    fn col_slice(&mut self, x: &V, start: usize, len: usize) -> V {
        Rc::new(x.col_slice(start, len))
    }

    fn concat_rows(&mut self, parts: &[V]) -> Result<V> {
        let refs: Vec<&Matrix> = parts.iter().map(|p| p.as_ref()).collect();
        Ok(Rc::new(concat_rows_value(&refs)?))
    }

    fn concat_cols(&mut self, parts: &[V]) -> Result<V> {
        let refs: Vec<&Matrix> = parts.iter().map(|p| p.as_ref()).collect();
        Ok(Rc::new(concat_cols_value(&refs)?))
    }

    fn select_cols(&mut self, x: &V, cols: &[usize]) -> V {
        Rc::new(select_cols_value(x, cols))
    }

    fn layernorm_cols(&mut self, x: &V, gamma: &V, beta: &V) -> Result<V> {
        Ok(Rc::new(layernorm_forward(x, gamma, beta)?.0))
    }

    fn gelu(&mut self, x: &V) -> V {
        Rc::new(x.map(gelu))
    }

    fn softmax_rows(&mut self, x: &V) -> V {
        Rc::new(softmax_rows(x))
    }

    fn cross_entropy_cols(&mut self, logits: &V, labels: &[usize]) -> Result<V> {
        let (loss, _) = cross_entropy_value(logits, labels)?;
        Ok(Rc::new(Matrix::filled(1, 1, loss)))
    }

    fn l1(&mut self, x: &V) -> V {
        Rc::new(Matrix::filled(1, 1, l1_entrywise(x)))
    }
}
