#pragma once

#include "can/errors.hpp"
#include "can/random.hpp"
#include "can/tensor.hpp"
#include "can/ops.hpp"
#include "can/autograd.hpp"
#include "can/checkpoint.hpp"
#include "can/nn.hpp"
#include "can/attention.hpp"
#include "can/grounding.hpp"
#include "can/coattention.hpp"
#include "can/reduction.hpp"
#include "can/vcr_data.hpp"
#include "can/model.hpp"
#include "can/trainer.hpp"
#include "can/inspect.hpp"
#include "can/gradcheck.hpp"
