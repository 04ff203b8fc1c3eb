//! Reverse-mode gradients on a small expression, checked against central
//! differences, and what `detach` does to them.

use s3pet::autodiff::{check_gradients, Tape, Tensor};

fn main() -> s3pet::Result<()> {
    let x = Tensor::new(vec![2, 3], vec![0.5, -1.0, 2.0, 0.3, 0.0, -0.7])?;
    let w = Tensor::new(vec![3, 2], vec![1.0, -0.5, 0.25, 2.0, -1.5, 0.75])?;

    // cross-entropy of var_normalize(x w) against fixed targets
    let check = check_gradients(&[x.clone(), w], 1e-5, |t, v| {
        let logits = t.matmul(v[0], v[1])?;
        let h = t.var_normalize(logits);
        t.cross_entropy(h, &[1, 0])
    })?;
    println!("relative error per input: {:?}", check.per_input);

    let mut p = x.clone();
    p.set_requires_grad(true);
    let mut tape = Tape::new();
    let xv = tape.leaf(&p);
    let frozen = tape.detach(xv);
    let prod = tape.mul(frozen, xv)?;
    let loss = tape.sum(prod);
    tape.backward(loss)?;
    println!("d/dx sum(detach(x) * x) = {:?}", tape.grad(xv).unwrap());
    println!("x                       = {:?}", x.data());
    Ok(())
}
