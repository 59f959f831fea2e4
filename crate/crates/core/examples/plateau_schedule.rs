//! Feeds a stalling loss curve to the plateau schedule and prints when the
//! learning rate drops.

use wavenhance::training::PlateauSchedule;

fn main() {
    let mut sched = PlateauSchedule::new(3, 0.2, 1e-6);
    let mut lr = 2e-4;
    for epoch in 0..20 {
        let loss = if epoch < 5 { 1.0 / (epoch + 1) as f64 } else { 0.2 };
        let next = sched.update(loss, lr).unwrap();
        if next != lr {
            println!("epoch {epoch:>2}: loss {loss:.3}  lr {lr:.2e} -> {next:.2e}");
        }
        lr = next;
    }
}
