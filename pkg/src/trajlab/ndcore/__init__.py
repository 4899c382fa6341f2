"""Minimal float64 tensor arithmetic with reverse-mode gradients."""
from .tensor import (Tensor, DimensionError, no_grad, add, sub, mul, matmul, sigmoid, tanh,
                     exp, log, softplus, square, tsum, mean, concat, stack, reshape, embedding,
                     pick, log_softmax, softmax, softmax_cross_entropy, MASK_FILL)
from .params import ParameterSet, adam_step, dumps, loads, save, load, init_uniform
from .cells import (RecurrentCellConfig, StackedRNN, gru_step, lstm_step,
                    gru_fused, lstm_fused, add_gru, add_lstm,
                    add_linear, linear)
from .gradcheck import gradient_check, NumericError
