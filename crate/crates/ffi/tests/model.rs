use std::ffi::CString;
use std::ptr;

use maskanynet::image::Image;
use maskanynet::model::{BackboneId, MaskAnyNet, ModelConfig, Mode};
use maskanynet_ffi::*;

#[test]
fn checkpoint_logits_match_the_rust_api() {
    let dir = tempfile::tempdir().unwrap();
    let model = MaskAnyNet::new(ModelConfig::cifar(BackboneId::ResnetTiny)).unwrap();
    model.save(dir.path()).unwrap();
    let img = Image::from_fn(3, 32, 32, |c, y, x| ((c + 2 * y + 3 * x) % 17) as f32 / 16.0);
    let expected: Vec<f32> = model
        .forward(std::slice::from_ref(&img), Mode::Eval, 0)
        .unwrap()
        .get(0)
        .unwrap()
        .to_vec1()
        .unwrap();

    let path = CString::new(dir.path().to_str().unwrap()).unwrap();
    unsafe {
        let (mut handle, mut image) = (ptr::null_mut(), ptr::null_mut());
        assert_eq!(mak_model_load(path.as_ptr(), &mut handle), MakStatus::Ok);
        assert_eq!(mak_image_new(3, 32, 32, img.data().as_ptr(), &mut image), MakStatus::Ok);
        let mut classes = 0;
        assert_eq!(mak_model_num_classes(handle, &mut classes), MakStatus::Ok);
        let mut logits = vec![0f32; classes];
        assert_eq!(
            mak_model_predict(handle, image, logits.as_mut_ptr(), classes),
            MakStatus::Ok
        );
        assert_eq!(logits, expected);
        assert_eq!(
            mak_model_predict(handle, image, logits.as_mut_ptr(), 2),
            MakStatus::BufferTooSmall
        );
        mak_image_free(image);
        mak_model_free(handle);
    }
}
