//! Reverse-mode gradients through a small convolutional expression.

use mdnet::Tensor;

fn main() {
    let image = Tensor::<f64>::new(&[1, 4, 4], (0..16).map(|i| i as f64 / 16.0).collect());
    let weight = Tensor::<f64>::param(&[2, 1, 3, 3], vec![0.1; 18]);
    let bias = Tensor::<f64>::param(&[2], vec![0.0, -0.2]);

    let y = image.conv2d(&weight, &bias, 1, 1).relu().l2_normalize_channels(1e-10);
    let loss = y.channel(0).max_pool2d(3).mean();
    loss.backward();

    println!("loss = {:.6}", loss.item());
    println!("d loss / d bias = {:?}", bias.grad().unwrap());
    println!("d loss / d weight[0] = {:?}", &weight.grad().unwrap()[..9]);
}
