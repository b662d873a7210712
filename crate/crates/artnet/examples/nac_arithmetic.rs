//! Trains a neural accumulator on two-operand arithmetic and shows why it
//! extrapolates: the effective weight matrix converges to signed ones.
//!
//! The accumulator parameterizes its weights as tanh(What) * sigmoid(Mhat),
//! which saturates toward {-1, 0, 1} — addition and subtraction become exact
//! linear maps that keep working far outside the training range.
//!
//! Run with `cargo run --release --example nac_arithmetic`.

use artnet::arn::NacStack;
use artnet::objectives::{AdamW, GradAccumulator, OptimizerConfig};
use artnet::params::ParamStore;
use artnet::tensor::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() {
    for (name, f) in [
        ("a + b", (|a, b| a + b) as fn(f64, f64) -> f64),
        ("a - b", |a, b| a - b),
    ] {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        let nac = NacStack::new(&mut store, "nac", &[2, 1], &mut rng).expect("two-layer stack");
        // beta2 low enough that the second moment tracks the fast-decaying
        // gradient as tanh/sigmoid saturate.
        let mut opt = AdamW::new(
            OptimizerConfig {
                lr: 0.1,
                beta2: 0.99,
                weight_decay: 0.0,
                eps: 1e-8,
                ..OptimizerConfig::default()
            },
            &store,
        );

        let n = 256;
        let make = |lo: f64, hi: f64, rng: &mut ChaCha8Rng| {
            let xs: Vec<f64> = (0..2 * n).map(|_| rng.gen_range(lo..hi)).collect();
            let ys: Vec<f64> = xs.chunks(2).map(|p| f(p[0], p[1])).collect();
            (Tensor::matrix(n, 2, xs), Tensor::vector(ys))
        };
        let (x_train, y_train) = make(0.0, 10.0, &mut rng);

        let mse = |store: &ParamStore, x: &Tensor, y: &Tensor, grads: bool| {
            let g = Graph::new();
            let bind = store.bind(&g);
            let w = nac.effective_weight(&g, &bind, 0).expect("first layer weight");
            let pred = g
                .reshape(g.matmul_nt(g.constant(x.clone()), w).unwrap(), &[x.rows()])
                .unwrap();
            let diff = g.sub(pred, g.constant(y.clone())).unwrap();
            let loss = g.mean(g.mul(diff, diff).unwrap()).unwrap();
            let val = g.value(loss).item();
            let grad = grads.then(|| {
                g.backward(loss).unwrap();
                bind.gradients(&g)
            });
            (val, grad)
        };

        for step in 0..3000 {
            let (loss, grads) = mse(&store, &x_train, &y_train, true);
            if step % 600 == 0 {
                println!("{name}: step {step:>4}  train mse {loss:.6}");
            }
            let mut acc = GradAccumulator::new(&store);
            acc.add(&grads.unwrap());
            opt.step(&mut store, &acc.take()).expect("finite gradients");
        }

        let (train_mse, _) = mse(&store, &x_train, &y_train, false);
        let (x_far, y_far) = make(10.0, 20.0, &mut rng);
        let (far_mse, _) = mse(&store, &x_far, &y_far, false);

        let g = Graph::new();
        let bind = store.bind(&g);
        let w = nac.effective_weight(&g, &bind, 0).expect("first layer weight");
        let wv = g.value(w);
        println!(
            "{name}: final train mse {train_mse:.2e}, extrapolation mse {far_mse:.2e} on [10, 20)"
        );
        println!(
            "{name}: effective weights [{:+.4} {:+.4}] (ideal [{:+} {:+}])\n",
            wv.data()[0],
            wv.data()[1],
            1,
            if name == "a + b" { 1 } else { -1 },
        );
    }
}
