//! POPE scoring of free-form yes/no answers, including ones that answer
//! neither way.

use convis::eval::{pope_question, pope_score, Parsed, PopeItem, YesNo};

fn main() -> convis::Result<()> {
    let answers = [
        ("img1", "dog", YesNo::Yes, "Yes, there is a dog."),
        ("img1", "cat", YesNo::No, "No."),
        ("img1", "chair", YesNo::No, "Yes"),
        ("img2", "car", YesNo::Yes, "no, I don't see one"),
        ("img2", "person", YesNo::Yes, "It is hard to tell."),
        ("img2", "kite", YesNo::No, "NO"),
    ];
    let items: Vec<PopeItem> = answers
        .iter()
        .map(|(img, obj, label, answer)| PopeItem::new(*img, *obj, *label, *answer))
        .collect();
    for it in &items {
        let mark = if it.parsed == Parsed::Unparseable { "  (unparseable)" } else { "" };
        println!("{}: {}\n  -> {:?}{mark}", it.image_ref, pope_question(&it.object), it.answer);
    }
    let s = pope_score(&items)?;
    println!(
        "\naccuracy {:.3} precision {:.3} recall {:.3} f1 {:.3} (tp {} fp {} tn {} fn {})",
        s.accuracy, s.precision, s.recall, s.f1, s.tp, s.fp, s.tn, s.fn_
    );
    Ok(())
}
