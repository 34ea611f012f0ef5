#pragma once

#include <string>
#include <vector>

#include "vaenar/common.hpp"

namespace vaenar {

// Full symbol inventory: 26 letters, 10 digits, space and 6 punctuation
// marks (43 symbols). A configured vocabulary of size V uses the first V.
inline const std::string kSymbolTable = "abcdefghijklmnopqrstuvwxyz0123456789 .,!?-'";

int vocab_table_size();

// Maps text onto symbol ids within a vocabulary of the given size; throws
// VocabError listing every offending character.
std::vector<int> text_to_ids(const std::string& text, int vocab_size);

std::string ids_to_text(const std::vector<int>& ids);

}  // namespace vaenar
