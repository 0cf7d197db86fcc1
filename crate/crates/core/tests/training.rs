use mgsa::config::Profile;
use mgsa::kg::{Corpus, Split};
use mgsa::model::Model;
use mgsa::seq2seq::train;
use mgsa::synthetic::toy_corpus;
use mgsa::vocab::build_vocab;

#[test]
fn toy_loss_falls_every_epoch_at_first() {
    let data = toy_corpus();
    let vocab = build_vocab(
        &Corpus {
            examples: data.clone(),
            split: Split::Train,
        },
        1,
    );
    let mut m = Model::new(Profile::Desk.model(), vocab, 42).unwrap();
    let mut tc = Profile::Desk.train();
    tc.epochs = 5;
    let log = train(&mut m, &data, &tc, |_, _, _| Ok(())).unwrap();
    assert_eq!(log.epochs.len(), 5);
    for w in log.epochs.windows(2) {
        assert!(w[1] < w[0], "{:?}", log.epochs);
    }
}
