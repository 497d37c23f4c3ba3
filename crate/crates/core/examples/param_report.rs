use cupe::model::{EncoderState, ModelConfig};

fn main() -> cupe::Result<()> {
    let full = EncoderState::build(ModelConfig::default(), 0)?;
    println!("default: {:?}", full.param_report());
    let desk = EncoderState::build(ModelConfig::desk(8), 0)?;
    println!("desk: {:?}", desk.param_report());
    Ok(())
}
