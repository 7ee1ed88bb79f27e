use crate::data::Label;
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Task loss on one sample: mean binary cross-entropy with logits over the
/// four flags, or absolute error for a sentiment score.
pub fn loss(tape: &mut Tape, logits: Var, label: &Label) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    match label {
        Label::Multilabel(flags) => {
            if shape != [4] {
                return Err(Error::Contract(format!("multilabel loss needs 4 logits, got shape {shape:?}")));
            }
            let y = tape.constant(Tensor::new(vec![4], flags.map(|f| f64::from(u8::from(f))).to_vec())?);
            // softplus(x) - x·y == -[y ln σ(x) + (1-y) ln(1-σ(x))]
            let sp = tape.softplus(logits);
            let xy = tape.mul(logits, y)?;
            let per = tape.sub(sp, xy)?;
            Ok(tape.mean(per))
        }
        Label::Sentiment(y) => {
            if shape != [1] {
                return Err(Error::Contract(format!("sentiment loss needs 1 logit, got shape {shape:?}")));
            }
            let d = tape.add_scalar(logits, -y);
            let a = tape.abs(d);
            Ok(tape.sum(a))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn eval(logits: &[f64], label: &Label) -> f64 {
        let mut t = Tape::new();
        let x = t.constant(Tensor::new(vec![logits.len()], logits.to_vec()).unwrap());
        let l = loss(&mut t, x, label).unwrap();
        t.item(l)
    }

    #[test]
    fn examples() {
        assert_eq!(eval(&[1.5], &Label::Sentiment(-0.5)), 2.0);
        let ln2 = std::f64::consts::LN_2;
        for flags in [[true; 4], [false; 4], [true, false, true, false]] {
            assert!((eval(&[0.0; 4], &Label::Multilabel(flags)) - ln2).abs() < 1e-15);
        }
        let perfect = eval(&[40.0, -40.0, 40.0, -40.0], &Label::Multilabel([true, false, true, false]));
        assert!(perfect < 1e-3);
    }

    #[test]
    fn shape_mismatch_is_contract_error() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::zeros(&[2]));
        assert!(matches!(loss(&mut t, x, &Label::Sentiment(0.0)), Err(Error::Contract(_))));
        assert!(matches!(loss(&mut t, x, &Label::Multilabel([false; 4])), Err(Error::Contract(_))));
    }
}
