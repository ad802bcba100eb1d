//! Accuracy, MAE and CCC, and why CCC is preferred over correlation for
//! affect regression.

use avmult::metrics::{accuracy, ccc, mae, pearson, MetricsReport};

fn main() -> avmult::Result<()> {
    let truth = [1.0, 2.0, 3.0, 4.0, 5.0];
    for (label, pred) in [("exact", [1.0, 2.0, 3.0, 4.0, 5.0]), ("shifted", [2.0, 3.0, 4.0, 5.0, 6.0]), ("compressed", [2.5, 2.75, 3.0, 3.25, 3.5])] {
        println!(
            "{label:<10} pearson {:.3}  ccc {:.3}  mae {:.3}",
            pearson(&pred, &truth)?,
            ccc(&pred, &truth)?,
            mae(&pred, &truth)?
        );
    }
    println!("accuracy {:.2}", accuracy(&[0, 1, 1, 0], &[0, 1, 0, 0])?);
    let report = MetricsReport::regression(
        &["arousal", "valence"],
        &[vec![2.0, 3.1], vec![3.0, 2.2], vec![4.1, 3.9]],
        &[vec![2.2, 3.0], vec![3.1, 2.5], vec![3.9, 4.0]],
    )?;
    println!("{}", serde_json::to_string_pretty(&report).unwrap());
    Ok(())
}
