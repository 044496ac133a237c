use std::time::Instant;

use menisc_autograd::{Graph, Tensor};

fn main() {
    let x = Tensor::<f32>::from_fn(&[1, 16, 32, 32, 16], |i| ((i * 7919) % 1000) as f32 * 1e-3);
    let w = Tensor::<f32>::from_fn(&[16, 16, 3, 3, 3], |i| ((i * 31) % 17) as f32 * 1e-2);
    let reps = 10;
    let t = Instant::now();
    for _ in 0..reps {
        let g = Graph::new();
        let xv = g.constant(x.clone());
        let wv = g.input(w.clone());
        let y = xv.conv3d(&wv, None, [1, 1, 1]).unwrap().sum();
        g.backward(y).unwrap();
    }
    let secs = t.elapsed().as_secs_f64() / reps as f64;
    let macs = 16.0 * 16.0 * 27.0 * 32.0 * 32.0 * 16.0 * 2.0; // forward + weight grad
    println!("conv3d 16->16 on 32x32x16: {:.1} ms/iter, {:.2} GMAC/s", secs * 1e3, macs / secs / 1e9);
}
