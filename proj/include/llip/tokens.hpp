#pragma once

namespace llip::tok {

// Special token ids shared by the tokenizer and the text encoder.
constexpr int pad = 0;
constexpr int bos = 1;
constexpr int eos = 2;
constexpr int unk = 3;
constexpr int first_word = 4;

}  // namespace llip::tok
