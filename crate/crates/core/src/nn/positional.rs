use super::params::Session;
use crate::error::{Error, Result};
use crate::tensor::{Tensor, Var};

/// Sinusoidal position table: even columns `sin(pos / 10000^(2i/d))`,
/// odd columns the matching cosine.
pub fn positional_encoding(len: usize, width: usize) -> Result<Tensor> {
    if len == 0 {
        return Err(Error::EmptySequence {
            what: "positional encoding".into(),
        });
    }
    if width == 0 || width % 2 != 0 {
        return Err(Error::Config(format!(
            "positional width must be even and positive, got {width}"
        )));
    }
    let mut data = vec![0.0; len * width];
    for pos in 0..len {
        for i in 0..width / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / width as f64);
            data[pos * width + 2 * i] = angle.sin();
            data[pos * width + 2 * i + 1] = angle.cos();
        }
    }
    Tensor::new(vec![len, width], data)
}

/// Precomputed, non-trainable table up to a fixed capacity.
#[derive(Clone, Debug)]
pub struct PositionalTable {
    table: Tensor,
    max_len: usize,
    width: usize,
}

impl PositionalTable {
    pub fn new(max_len: usize, width: usize) -> Result<Self> {
        Ok(PositionalTable {
            table: positional_encoding(max_len, width)?,
            max_len,
            width,
        })
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    /// First `len` rows of the table.
    pub fn rows(&self, len: usize) -> Result<Tensor> {
        if len > self.max_len {
            return Err(Error::Capacity {
                len,
                max_len: self.max_len,
            });
        }
        Tensor::new(
            vec![len, self.width],
            self.table.data()[..len * self.width].to_vec(),
        )
    }

    /// `x + PE(T, d)` for a `[T, d]` sequence.
    pub fn add_to(&self, s: &mut Session, x: Var) -> Result<Var> {
        let shape = s.tape.shape(x).to_vec();
        if shape.len() != 2 || shape[1] != self.width {
            return Err(Error::dim("positional_encoding", &shape, &[self.max_len, self.width]));
        }
        let pe = s.constant(self.rows(shape[0])?);
        s.tape.add(x, pe)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_row_alternates_zero_one() {
        let pe = positional_encoding(3, 6).unwrap();
        assert_eq!(pe.row(0), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn entries_bounded() {
        let pe = positional_encoding(64, 16).unwrap();
        assert!(pe.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn matches_per_element_formula() {
        let pe = positional_encoding(8, 4).unwrap();
        for pos in 0..8 {
            for col in 0..4 {
                let pair = (col / 2) as f64;
                let denom = 10000f64.powf(2.0 * pair / 4.0);
                let expect = if col % 2 == 0 {
                    (pos as f64 / denom).sin()
                } else {
                    (pos as f64 / denom).cos()
                };
                assert_eq!(pe.data()[pos * 4 + col], expect);
            }
        }
        // frozen spot values: PE[1,0] = sin 1, PE[3,2] = sin(3/100), PE[7,3] = cos(7/100)
        assert!((pe.data()[4] - 0.8414709848078965).abs() < 1e-15);
        assert!((pe.data()[3 * 4 + 2] - 0.02999550020249566).abs() < 1e-15);
        assert!((pe.data()[7 * 4 + 3] - 0.9975510002532796).abs() < 1e-15);
    }

    #[test]
    fn rejects_odd_width_and_overflow() {
        assert!(positional_encoding(4, 3).is_err());
        let table = PositionalTable::new(5, 4).unwrap();
        assert!(table.rows(5).is_ok());
        assert!(matches!(table.rows(6), Err(Error::Capacity { len: 6, max_len: 5 })));
    }
}
