use ndarray::Array2;

#[test]
fn dot_strides() {
    let a = Array2::<f32>::ones((16, 1));
    let b = Array2::<f32>::ones((64, 1));
    let r = a.dot(&b.t());
    println!("shape {:?} strides {:?} std {}", r.shape(), r.strides(), r.is_standard_layout());
    let r2 = r.into_shape_with_order(ndarray::IxDyn(&[1, 16, 64]));
    println!("reshape ok: {}", r2.is_ok());
}
