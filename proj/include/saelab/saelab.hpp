#pragma once

// Everything except manifest.hpp, which needs OpenSSL at link time.

#include "saelab/batching.hpp"
#include "saelab/checkpoint.hpp"
#include "saelab/common.hpp"
#include "saelab/config.hpp"
#include "saelab/eval.hpp"
#include "saelab/grad_check.hpp"
#include "saelab/optim.hpp"
#include "saelab/pipeline.hpp"
#include "saelab/sae.hpp"
#include "saelab/shard.hpp"
#include "saelab/steering.hpp"
#include "saelab/suppression.hpp"
#include "saelab/synth.hpp"
#include "saelab/toy_vit.hpp"
#include "saelab/train.hpp"
#include "saelab/vision_data.hpp"
#include "saelab/vocab.hpp"
