// placeholder until the core crate lands
