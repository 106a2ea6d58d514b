#![allow(dead_code)]

use futuresight_core::corpus::{build_idf_table, default_stopwords, IdfTable, Story};
use futuresight_core::generation::Engine;
use futuresight_core::model::{InjectionMode, Model, ModelConfig};
use futuresight_core::tokenizer::Tokenizer;

pub const STORIES: [&str; 3] = [
    "Mara found a map in the attic. She packed bread and water. The forest was dark and cold. A fox watched her from the ferns. She crossed the river at dawn.",
    "The swamp creatures were relentless in their siege. The nurse counted the bandages twice. Nobody slept that night. The lanterns burned low. At dawn the walls still stood.",
    "Tom built a kite from old newspapers. The wind lifted it over the barn. His sister cheered from the fence. The string snapped near sunset. The kite sailed toward the hills.",
];

pub fn tokenizer() -> Tokenizer {
    Tokenizer::train(STORIES, 320).unwrap()
}

pub fn idf() -> IdfTable {
    let stories: Vec<Story> = STORIES.iter().enumerate().map(|(i, t)| Story::new(format!("s{i}"), *t).unwrap()).collect();
    build_idf_table(&stories, &default_stopwords()).unwrap()
}

pub fn tiny_config(vocab_size: usize, mode: InjectionMode) -> ModelConfig {
    ModelConfig {
        vocab_size,
        d_model: 16,
        d_enc: 16,
        n_heads: 2,
        n_layers_dec: 2,
        n_layers_enc: 1,
        d_ff: 32,
        max_seq: 96,
        injection_mode: mode,
        seed: 3,
    }
}

pub fn engine(mode: InjectionMode) -> Engine {
    let tok = tokenizer();
    let model = Model::new(tiny_config(tok.vocab_size(), mode)).unwrap();
    Engine::new(model, tok).unwrap()
}
