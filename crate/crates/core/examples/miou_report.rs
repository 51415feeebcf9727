//! Accumulates a confusion matrix over predictions and splits mean IoU into
//! base, novel and all classes.

use hyciss::eval::{self, ConfusionMatrix};
use hyciss::protocol::Partition;
use hyciss::taxonomy::{BACKGROUND, IGNORE};

fn main() -> hyciss::Result<()> {
    let classes = [1, 2, 3];
    let gt = [1, 1, 2, 2, 3, 3, BACKGROUND, IGNORE];
    let pred = [1, 2, 2, 2, 3, BACKGROUND, BACKGROUND, 1];
    let mut cm = ConfusionMatrix::new(&classes);
    cm.accumulate(&pred, &gt)?;
    for c in classes {
        println!("IoU class {c}: {:?}", cm.iou(c)?);
    }
    let part = Partition { base: vec![1, 2], novel: vec![3] };
    let report = cm.report(&part, 2)?;
    println!("base {:?} novel {:?} all {:?}", report.miou_base, report.miou_novel, report.miou_all);
    print!("{}", eval::summary_csv(&[report]));
    Ok(())
}
