#pragma once

namespace dfseg {

// Full command-line surface (phantom-gen, preprocess, train, infer,
// evaluate). Exposed as a function so tests can drive the tool in-process.
int cli_main(int argc, const char* const* argv);

}  // namespace dfseg
