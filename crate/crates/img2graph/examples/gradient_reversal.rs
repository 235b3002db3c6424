//! The gradient-reversal operation: identity on the forward pass, a factor
//! of -alpha on the way back. The warm-up schedule ramps alpha smoothly.

use img2graph::autodiff::{alpha_schedule, Tape};

fn main() {
    let mut tape = Tape::new();
    let x = tape.value(0.7);
    let through = tape.grad_reverse(x, 1.5);
    let y = tape.mul(through, through);
    println!(
        "forward: x = {}, grl(x) = {} (identical)",
        tape.data(x),
        tape.data(through),
    );

    tape.backward(y);
    println!(
        "backward d(x^2)/dx: plain would give {}, through grl(alpha=1.5) gives {}",
        2.0 * tape.data(x),
        tape.grad(x),
    );

    println!("\nalpha warm-up schedule (alpha_max = 1, gamma = 10):");
    for p in [0.0, 0.1, 0.25, 0.5, 1.0] {
        println!("  progress {p:<4} -> alpha {:.4}", alpha_schedule(p, 1.0, 10.0));
    }
}
