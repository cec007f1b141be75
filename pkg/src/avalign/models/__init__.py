from .common import (
    FUSIONS,
    MODEL_KINDS,
    AlignmentRecord,
    Batch,
    ModelConfig,
    attend,
    au_head,
    au_loss,
    ce_loss,
    encode_audio,
    encode_video,
    make_batch,
)
from .fusion import fuse, init_fusion
from .seq2seq import (
    AudioOnlyModel,
    AVAlignModel,
    AVCatModel,
    DecodeResult,
    Encoded,
    Seq2SeqModel,
    av_attend_encode,
    build_model,
)
